//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform features with a label driven by the first two columns plus noise.
pub fn classification_data(n: usize, p: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let y = (0..n)
        .map(|i| {
            let signal = x[[i, 0]] + 0.5 * x[[i, 1.min(p - 1)]];
            u8::from(signal + 0.3 * rng.random_range(-1.0..1.0) > 0.0)
        })
        .collect();
    (x, y)
}
