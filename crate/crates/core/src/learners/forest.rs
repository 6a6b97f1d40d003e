use ndarray::ArrayView2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow_tree, DecisionTree, TrainingSet, TreeSettings};
use super::LearnerError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestSettings {
    pub n_estimators: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None` means floor(sqrt(p)).
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestSettings {
    fn default() -> Self {
        ForestSettings {
            n_estimators: 200,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_estimators: usize,
    pub features_per_split: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
    pub n_features: usize,
}

pub fn default_features_per_split(p: usize) -> usize {
    ((p as f64).sqrt().floor() as usize).max(1)
}

pub fn train_forest(x: ArrayView2<f64>, y: &[u8], settings: &ForestSettings) -> Result<ForestModel, LearnerError> {
    let data = TrainingSet::new(x, y)?;
    fit_forest(&data, settings)
}

/// Trains on a prepared [`TrainingSet`]. Tree `t` draws its bootstrap and
/// feature samples from a stream derived from `(seed, t)`, so the first `k`
/// trees of a larger forest equal a `k`-tree forest with the same seed.
pub fn fit_forest(data: &TrainingSet, settings: &ForestSettings) -> Result<ForestModel, LearnerError> {
    if settings.n_estimators == 0 {
        return Err(LearnerError::InvalidSetting("n_estimators must be >= 1".into()));
    }
    if data.n_rows() == 0 {
        return Err(LearnerError::Empty);
    }
    let p = data.n_features();
    let k = settings
        .features_per_split
        .unwrap_or_else(|| default_features_per_split(p))
        .clamp(1, p.max(1));
    let tree_settings = TreeSettings {
        max_depth: settings.max_depth,
        min_samples_split: settings.min_samples_split,
        features_per_split: Some(k),
    };
    let n = data.n_rows();
    let trees = (0..settings.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut tree_rng = rng::stream(settings.seed, t as u64);
            let weights = if settings.bootstrap {
                let mut w = vec![0.0; n];
                for _ in 0..n {
                    w[tree_rng.random_range(0..n)] += 1.0;
                }
                w
            } else {
                vec![1.0; n]
            };
            grow_tree(data, &weights, &tree_settings, &mut tree_rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ForestModel {
        trees,
        n_estimators: settings.n_estimators,
        features_per_split: k,
        max_depth: settings.max_depth,
        min_samples_split: settings.min_samples_split,
        bootstrap: settings.bootstrap,
        seed: settings.seed,
        n_features: p,
    })
}

impl ForestModel {
    /// Mean of the trees' leaf probabilities.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| match r.as_slice() {
                Some(s) => self.predict_row(s),
                None => self.predict_row(&r.to_vec()),
            })
            .collect()
    }

    /// Mean leaf probability of the first `k` trees for every row, for each
    /// `k` in `prefixes` (each at most the forest size).
    pub fn prefix_predictions(&self, x: ArrayView2<f64>, prefixes: &[usize]) -> Vec<Vec<f64>> {
        self.truncated_prefix_predictions(x, prefixes, None, 2)
    }

    /// Like [`ForestModel::prefix_predictions`], but every tree is cut back
    /// to `max_depth` / `min_samples_split`. Tighter limits than the ones the
    /// forest was grown with reproduce a forest trained with those limits.
    pub fn truncated_prefix_predictions(
        &self,
        x: ArrayView2<f64>,
        prefixes: &[usize],
        max_depth: Option<usize>,
        min_samples_split: usize,
    ) -> Vec<Vec<f64>> {
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut sums = vec![0.0; rows.len()];
        let mut out = vec![Vec::new(); prefixes.len()];
        for (t, tree) in self.trees.iter().enumerate() {
            for (s, row) in sums.iter_mut().zip(&rows) {
                *s += tree.predict_row_truncated(row, max_depth, min_samples_split);
            }
            for (slot, &k) in out.iter_mut().zip(prefixes) {
                if k == t + 1 {
                    *slot = sums.iter().map(|s| s / k as f64).collect();
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn xor(n: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            x[[i, 0]] = a;
            x[[i, 1]] = b;
            y.push(u8::from((a > 0.0) != (b > 0.0)));
        }
        (x, y)
    }

    #[test]
    fn single_tree_memorizes_without_bootstrap() {
        let (x, y) = xor(60, 1);
        let s = ForestSettings { n_estimators: 1, bootstrap: false, features_per_split: Some(2), ..Default::default() };
        let f = train_forest(x.view(), &y, &s).unwrap();
        let p = f.predict_proba(x.view());
        let acc = p.iter().zip(&y).filter(|(p, y)| u8::from(**p >= 0.5) == **y).count();
        assert_eq!(acc, 60);
    }

    #[test]
    fn xor_held_out_accuracy() {
        let (x, y) = xor(200, 11);
        let (xt, yt) = xor(500, 12);
        let s = ForestSettings { n_estimators: 200, seed: 5, ..Default::default() };
        let f = train_forest(x.view(), &y, &s).unwrap();
        let p = f.predict_proba(xt.view());
        let acc = p.iter().zip(&yt).filter(|(p, y)| u8::from(**p >= 0.5) == **y).count() as f64 / 500.0;
        assert!(acc > 0.9, "accuracy {acc}");
    }

    #[test]
    fn same_seed_same_forest() {
        let (x, y) = xor(100, 3);
        let s = ForestSettings { n_estimators: 10, seed: 9, ..Default::default() };
        let a = train_forest(x.view(), &y, &s).unwrap();
        let b = train_forest(x.view(), &y, &s).unwrap();
        assert_eq!(a, b);
        let c = train_forest(x.view(), &y, &ForestSettings { seed: 10, ..s }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_matches_smaller_forest() {
        let (x, y) = xor(80, 4);
        let big = train_forest(x.view(), &y, &ForestSettings { n_estimators: 6, seed: 2, ..Default::default() }).unwrap();
        let small = train_forest(x.view(), &y, &ForestSettings { n_estimators: 3, seed: 2, ..Default::default() }).unwrap();
        assert_eq!(&big.trees[..3], &small.trees[..]);
        let pre = big.prefix_predictions(x.view(), &[3, 6]);
        assert_eq!(pre[0], small.predict_proba(x.view()));
        assert_eq!(pre[1], big.predict_proba(x.view()));
    }

    #[test]
    fn truncation_matches_constrained_forest() {
        let (base, y) = xor(150, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((150, 5), |(i, j)| if j < 2 { base[[i, j]] } else { rng.random_range(0.0..1.0) });
        let full = train_forest(x.view(), &y, &ForestSettings { n_estimators: 8, seed: 3, ..Default::default() }).unwrap();
        for (depth, mss) in [(Some(2), 2), (None, 10), (Some(4), 5)] {
            let s = ForestSettings { n_estimators: 8, seed: 3, max_depth: depth, min_samples_split: mss, ..Default::default() };
            let constrained = train_forest(x.view(), &y, &s).unwrap();
            let cut = full.truncated_prefix_predictions(x.view(), &[5, 8], depth, mss);
            let small = train_forest(x.view(), &y, &ForestSettings { n_estimators: 5, ..s }).unwrap();
            assert_eq!(cut[0], small.predict_proba(x.view()));
            assert_eq!(cut[1], constrained.predict_proba(x.view()));
        }
    }

    #[test]
    fn rejects_empty_and_zero_trees() {
        let x = Array2::<f64>::zeros((0, 2));
        assert!(train_forest(x.view(), &[], &ForestSettings::default()).is_err());
        let (x, y) = xor(10, 1);
        let s = ForestSettings { n_estimators: 0, ..Default::default() };
        assert!(train_forest(x.view(), &y, &s).is_err());
    }
}
