use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{check_inputs, LearnerError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticSettings {
    pub l2_lambda: f64,
    pub step_size: f64,
    pub epochs: usize,
}

impl Default for LogisticSettings {
    fn default() -> Self {
        LogisticSettings {
            l2_lambda: 1e-3,
            step_size: 0.5,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_lambda: f64,
    pub step_size: f64,
    pub epochs: usize,
    pub final_loss: f64,
    /// Objective after each epoch; not serialized.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean log-loss plus `(lambda/2)·|w|²` and its gradient with respect to
/// the weights and the (unpenalized) bias.
pub fn loss_and_gradient(
    x: ArrayView2<f64>,
    y: &[u8],
    weights: ArrayView1<f64>,
    bias: f64,
    l2_lambda: f64,
) -> (f64, Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let z = x.dot(&weights) + bias;
    let mut loss = 0.0;
    let mut residual = Array1::zeros(x.nrows());
    for (i, (&zi, &yi)) in z.iter().zip(y).enumerate() {
        let yf = f64::from(yi);
        loss += softplus(zi) - yf * zi;
        residual[i] = sigmoid(zi) - yf;
    }
    let grad_w = x.t().dot(&residual) / n + &weights * l2_lambda;
    let grad_b = residual.sum() / n;
    let penalty = 0.5 * l2_lambda * weights.dot(&weights);
    (loss / n + penalty, grad_w, grad_b)
}

/// Full-batch gradient descent from zero weights.
pub fn train_logistic(x: ArrayView2<f64>, y: &[u8], settings: &LogisticSettings) -> Result<LogisticModel, LearnerError> {
    check_inputs(x, y)?;
    if !(settings.step_size > 0.0 && settings.l2_lambda >= 0.0) {
        return Err(LearnerError::InvalidSetting("step_size must be > 0 and l2_lambda >= 0".into()));
    }
    let mut w = Array1::<f64>::zeros(x.ncols());
    let mut b = 0.0;
    let mut history = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let (_, gw, gb) = loss_and_gradient(x, y, w.view(), b, settings.l2_lambda);
        w.scaled_add(-settings.step_size, &gw);
        b -= settings.step_size * gb;
        history.push(loss_and_gradient(x, y, w.view(), b, settings.l2_lambda).0);
    }
    let final_loss = match history.last() {
        Some(l) => *l,
        None => loss_and_gradient(x, y, w.view(), b, settings.l2_lambda).0,
    };
    Ok(LogisticModel {
        weights: w.to_vec(),
        bias: b,
        l2_lambda: settings.l2_lambda,
        step_size: settings.step_size,
        epochs: settings.epochs,
        final_loss,
        loss_history: history,
    })
}

impl LogisticModel {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let w = ArrayView1::from(&self.weights);
        x.dot(&w).iter().map(|z| sigmoid(z + self.bias)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn zero_model_predicts_half() {
        let x = array![[1.0, 2.0], [-3.0, 0.5]];
        let m = LogisticModel {
            weights: vec![0.0, 0.0],
            bias: 0.0,
            l2_lambda: 0.0,
            step_size: 0.1,
            epochs: 0,
            final_loss: 0.0,
            loss_history: vec![],
        };
        assert_eq!(m.predict_proba(x.view()), vec![0.5, 0.5]);
    }

    #[test]
    fn gradient_at_zero_matches_hand_computation() {
        // at w = 0, b = 0 every probability is 0.5, so the gradient is
        // (1/n) X^T (0.5 - y); with y = (1, 1, 0, 0) the residuals are
        // (-0.5, -0.5, 0.5, 0.5)
        let x = array![[1.0, 2.0], [2.0, 0.0], [0.0, 1.0], [-1.0, 3.0]];
        let y = [1u8, 1, 0, 0];
        let (loss, gw, gb) = loss_and_gradient(x.view(), &y, Array1::zeros(2).view(), 0.0, 0.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((gw[0] - (-0.5 - 1.0 + 0.0 - 0.5) / 4.0).abs() < 1e-15);
        assert!((gw[1] - (-1.0 - 0.0 + 0.5 + 1.5) / 4.0).abs() < 1e-15);
        assert_eq!(gb, 0.0);
    }

    #[test]
    fn loss_decreases_monotonically() {
        let x = array![[0.5, 1.0], [1.5, -0.2], [-1.0, 0.3], [-0.7, -1.2], [0.1, 0.1], [2.0, 0.4]];
        let y = [1u8, 1, 0, 0, 0, 1];
        let s = LogisticSettings { l2_lambda: 0.01, step_size: 0.1, epochs: 300 };
        let m = train_logistic(x.view(), &y, &s).unwrap();
        assert!(m.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.final_loss < std::f64::consts::LN_2);
    }

    #[test]
    fn rejects_non_finite() {
        let x = array![[f64::NAN, 1.0]];
        assert!(matches!(
            train_logistic(x.view(), &[1], &LogisticSettings::default()),
            Err(LearnerError::NonFinite)
        ));
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            seed in 0u64..1000,
            rows in 3usize..12,
            cols in 1usize..5,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0));
            let y: Vec<u8> = (0..rows).map(|_| rng.random_range(0..2)).collect();
            let w = Array1::from_shape_fn(cols, |_| rng.random_range(-1.0..1.0));
            let b = rng.random_range(-1.0..1.0);
            let lambda = 0.1;
            let (_, gw, gb) = loss_and_gradient(x.view(), &y, w.view(), b, lambda);
            let h = 1e-5;
            for j in 0..cols {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let fd = (loss_and_gradient(x.view(), &y, wp.view(), b, lambda).0
                    - loss_and_gradient(x.view(), &y, wm.view(), b, lambda).0) / (2.0 * h);
                prop_assert!((fd - gw[j]).abs() <= 1e-5 * gw[j].abs().max(1.0));
            }
            let fd = (loss_and_gradient(x.view(), &y, w.view(), b + h, lambda).0
                - loss_and_gradient(x.view(), &y, w.view(), b - h, lambda).0) / (2.0 * h);
            prop_assert!((fd - gb).abs() <= 1e-5 * gb.abs().max(1.0));
        }
    }
}
