//! Chronological splits, expanding-window folds, forest grid search and
//! classification metrics.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use chrono::NaiveDate;
use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learners::{fit_forest, label, ForestSettings, LearnerError, TrainingSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need {needed} quarters, have {have}")]
    InsufficientQuarters { needed: usize, have: usize },
    #[error("split sizes must be positive")]
    ZeroSplit,
    #[error("fold count must be at least 1")]
    ZeroFolds,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{truth} labels but {pred} predictions")]
    Length { truth: usize, pred: usize },
    #[error("fold {fold} has no {part} rows")]
    EmptyFold { fold: usize, part: &'static str },
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_quarters: Vec<NaiveDate>,
    pub val_quarters: Vec<NaiveDate>,
    pub test_quarters: Vec<NaiveDate>,
}

/// Last `n_test` quarters go to test, the `n_val` before them to
/// validation, and the `n_train` before those to training. Quarters older
/// than the training window are left unassigned.
pub fn make_chrono_split(
    quarters: &[NaiveDate],
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<SplitPlan, EvalError> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(EvalError::ZeroSplit);
    }
    let needed = n_train + n_val + n_test;
    if needed > quarters.len() {
        return Err(EvalError::InsufficientQuarters { needed, have: quarters.len() });
    }
    let mut q = quarters.to_vec();
    q.sort_unstable();
    q.dedup();
    if needed > q.len() {
        return Err(EvalError::InsufficientQuarters { needed, have: q.len() });
    }
    let end = q.len();
    Ok(SplitPlan {
        train_quarters: q[end - needed..end - n_val - n_test].to_vec(),
        val_quarters: q[end - n_val - n_test..end - n_test].to_vec(),
        test_quarters: q[end - n_test..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_quarters: Vec<NaiveDate>,
    pub test_quarters: Vec<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Splits the quarters into `k + 1` contiguous blocks (earlier blocks take
/// the remainder); fold `j` trains on blocks `0..=j` and tests on `j + 1`.
pub fn make_folds(train_quarters: &[NaiveDate], k: usize) -> Result<FoldPlan, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroFolds);
    }
    let mut q = train_quarters.to_vec();
    q.sort_unstable();
    q.dedup();
    let blocks = k + 1;
    if q.len() < blocks {
        return Err(EvalError::InsufficientQuarters { needed: blocks, have: q.len() });
    }
    let (base, extra) = (q.len() / blocks, q.len() % blocks);
    let mut bounds = vec![0];
    for b in 0..blocks {
        bounds.push(bounds[b] + base + usize::from(b < extra));
    }
    let folds = (1..blocks)
        .map(|j| Fold {
            train_quarters: q[..bounds[j]].to_vec(),
            test_quarters: q[bounds[j]..bounds[j + 1]].to_vec(),
        })
        .collect();
    Ok(FoldPlan { folds })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub n_estimators: Vec<usize>,
    /// `None` is unlimited depth.
    pub max_depth: Vec<Option<usize>>,
    pub min_samples_split: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            n_estimators: vec![100, 200, 300],
            max_depth: vec![None, Some(10), Some(20)],
            min_samples_split: vec![2, 5, 10],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_estimators.is_empty() || self.max_depth.is_empty() || self.min_samples_split.is_empty() {
            return Err(EvalError::Grid("every axis needs at least one value".into()));
        }
        if self.n_estimators.contains(&0) {
            return Err(EvalError::Grid("n_estimators must be >= 1".into()));
        }
        if self.max_depth.contains(&Some(0)) {
            return Err(EvalError::Grid("max_depth must be >= 1".into()));
        }
        if self.min_samples_split.iter().any(|&m| m < 2) {
            return Err(EvalError::Grid("min_samples_split must be >= 2".into()));
        }
        Ok(())
    }

    /// Every combination, ordered by n_estimators, then max_depth, then
    /// min_samples_split as listed.
    pub fn combinations(&self) -> Vec<GridParams> {
        let mut out = Vec::new();
        for &n in &self.n_estimators {
            for &d in &self.max_depth {
                for &m in &self.min_samples_split {
                    out.push(GridParams { n_estimators: n, max_depth: d, min_samples_split: m });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridParams {
    pub n_estimators: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
}

impl GridParams {
    /// Cost order used to break score ties: fewer trees, then shallower,
    /// then larger min_samples_split. `Less` means cheaper.
    pub fn cost_cmp(&self, other: &GridParams) -> Ordering {
        let depth = |d: Option<usize>| d.unwrap_or(usize::MAX);
        self.n_estimators
            .cmp(&other.n_estimators)
            .then(depth(self.max_depth).cmp(&depth(other.max_depth)))
            .then(other.min_samples_split.cmp(&self.min_samples_split))
    }
}

/// Mean fold scores closer than this are treated as tied.
pub const SCORE_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub params: GridParams,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridParams,
    pub best_mean_f1: f64,
    pub table: Vec<GridRow>,
}

/// Picks the best row of a score table: highest mean F1, ties to the
/// cheaper model.
pub fn select_best(table: &[GridRow]) -> Option<&GridRow> {
    let mut best: Option<&GridRow> = None;
    for row in table {
        best = match best {
            None => Some(row),
            Some(b) if row.mean_f1 > b.mean_f1 + SCORE_TIE_EPS => Some(row),
            Some(b) if (row.mean_f1 - b.mean_f1).abs() <= SCORE_TIE_EPS && row.params.cost_cmp(&b.params) == Ordering::Less => {
                Some(row)
            }
            keep => keep,
        };
    }
    best
}

/// Exhaustive forest grid search over expanding folds. `row_quarters` gives
/// each row's quarter; `base` supplies seed, bootstrap and features per split.
///
/// Per fold a single forest is grown with the largest tree count and the
/// loosest limits in the grid. Tree randomness is keyed by tree index and
/// node path, so prefixes of that forest, cut back to tighter limits, are
/// exactly the forests every other combination would train.
pub fn grid_search(
    x: ArrayView2<f64>,
    y: &[u8],
    row_quarters: &[NaiveDate],
    grid: &HyperGrid,
    folds: &FoldPlan,
    base: &ForestSettings,
) -> Result<GridResult, EvalError> {
    grid.validate()?;
    if x.nrows() != y.len() || y.len() != row_quarters.len() {
        return Err(EvalError::Length { truth: y.len(), pred: x.nrows() });
    }
    if folds.folds.is_empty() {
        return Err(EvalError::ZeroFolds);
    }
    let combos = grid.combinations();
    let max_trees = *grid.n_estimators.iter().max().expect("validated");
    let loosest_depth = if grid.max_depth.contains(&None) {
        None
    } else {
        grid.max_depth.iter().flatten().max().copied()
    };
    let loosest_split = *grid.min_samples_split.iter().min().expect("validated");
    let mut depths = grid.max_depth.clone();
    depths.sort_unstable();
    depths.dedup();
    let mut splits = grid.min_samples_split.clone();
    splits.sort_unstable();
    splits.dedup();
    let mut counts = grid.n_estimators.clone();
    counts.sort_unstable();
    counts.dedup();

    let mut fold_scores = vec![vec![0.0; folds.folds.len()]; combos.len()];
    for (fi, fold) in folds.folds.iter().enumerate() {
        let train_q: BTreeSet<_> = fold.train_quarters.iter().collect();
        let test_q: BTreeSet<_> = fold.test_quarters.iter().collect();
        let train_idx: Vec<usize> = (0..y.len()).filter(|&i| train_q.contains(&row_quarters[i])).collect();
        let test_idx: Vec<usize> = (0..y.len()).filter(|&i| test_q.contains(&row_quarters[i])).collect();
        if train_idx.is_empty() {
            return Err(EvalError::EmptyFold { fold: fi, part: "training" });
        }
        if test_idx.is_empty() {
            return Err(EvalError::EmptyFold { fold: fi, part: "test" });
        }
        let xt = x.select(Axis(0), &train_idx);
        let yt: Vec<u8> = train_idx.iter().map(|&i| y[i]).collect();
        let xv = x.select(Axis(0), &test_idx);
        let yv: Vec<u8> = test_idx.iter().map(|&i| y[i]).collect();
        let data = TrainingSet::new(xt.view(), &yt)?;
        let forest = fit_forest(
            &data,
            &ForestSettings {
                n_estimators: max_trees,
                max_depth: loosest_depth,
                min_samples_split: loosest_split,
                ..*base
            },
        )?;
        log::debug!("fold {fi}: {} train rows, {} test rows", yt.len(), yv.len());
        for &d in &depths {
            for &m in &splits {
                let preds = forest.truncated_prefix_predictions(xv.view(), &counts, d, m);
                for (ci, &n) in counts.iter().enumerate() {
                    let labels: Vec<u8> = preds[ci].iter().map(|&p| label(p)).collect();
                    let f1 = score(&yv, &labels)?.f1_positive;
                    for (k, c) in combos.iter().enumerate() {
                        if c.n_estimators == n && c.max_depth == d && c.min_samples_split == m {
                            fold_scores[k][fi] = f1;
                        }
                    }
                }
            }
        }
    }
    let table: Vec<GridRow> = combos
        .into_iter()
        .zip(fold_scores)
        .map(|(params, fold_f1)| {
            let mean_f1 = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
            GridRow { params, fold_f1, mean_f1 }
        })
        .collect();
    let best = select_best(&table).expect("grid is nonempty").clone();
    Ok(GridResult {
        best: best.params,
        best_mean_f1: best.mean_f1,
        table,
    })
}

/// Counts with class 1 (index member) as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_positive: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_negative + self.false_positive + self.false_negative + self.true_positive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1_positive: f64,
    /// Indexed by class: [0, 1].
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub confusion: Confusion,
    pub cv_mean_f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn score(y_true: &[u8], y_pred: &[u8]) -> Result<MetricsReport, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::Length { truth: y_true.len(), pred: y_pred.len() });
    }
    let mut c = Confusion { true_negative: 0, false_positive: 0, false_negative: 0, true_positive: 0 };
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t != 0, p != 0) {
            (false, false) => c.true_negative += 1,
            (false, true) => c.false_positive += 1,
            (true, false) => c.false_negative += 1,
            (true, true) => c.true_positive += 1,
        }
    }
    let precision = [
        ratio(c.true_negative, c.true_negative + c.false_negative),
        ratio(c.true_positive, c.true_positive + c.false_positive),
    ];
    let recall = [
        ratio(c.true_negative, c.true_negative + c.false_positive),
        ratio(c.true_positive, c.true_positive + c.false_negative),
    ];
    Ok(MetricsReport {
        f1_positive: f1(precision[1], recall[1]),
        precision,
        recall,
        confusion: c,
        cv_mean_f1: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quarters(n: usize) -> Vec<NaiveDate> {
        crate::calendar::quarter_ends(2010, 1, n)
    }

    #[test]
    fn default_split_sizes() {
        let q = quarters(42);
        let s = make_chrono_split(&q, 35, 5, 2).unwrap();
        assert_eq!(s.train_quarters, q[..35]);
        assert_eq!(s.val_quarters, q[35..40]);
        assert_eq!(s.test_quarters, q[40..]);
        assert!(matches!(
            make_chrono_split(&quarters(10), 35, 5, 2),
            Err(EvalError::InsufficientQuarters { needed: 42, have: 10 })
        ));
    }

    #[test]
    fn short_train_window_takes_latest_quarters() {
        let q = quarters(12);
        let s = make_chrono_split(&q, 4, 2, 1).unwrap();
        assert_eq!(s.train_quarters, q[5..9]);
    }

    #[test]
    fn twelve_quarters_three_folds() {
        let q = quarters(12);
        let plan = make_folds(&q, 3).unwrap();
        let sizes: Vec<(usize, usize)> = plan.folds.iter().map(|f| (f.train_quarters.len(), f.test_quarters.len())).collect();
        assert_eq!(sizes, [(3, 3), (6, 3), (9, 3)]);
        assert_eq!(plan.folds[1].test_quarters, q[6..9]);
    }

    #[test]
    fn remainder_goes_to_early_blocks() {
        let plan = make_folds(&quarters(35), 5).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test_quarters.len()).collect();
        assert_eq!(sizes, [6, 6, 6, 6, 5]);
        assert_eq!(plan.folds[0].train_quarters.len(), 6);
        let one = make_folds(&quarters(5), 1).unwrap();
        assert_eq!(one.folds.len(), 1);
        assert_eq!((one.folds[0].train_quarters.len(), one.folds[0].test_quarters.len()), (3, 2));
        assert!(make_folds(&quarters(3), 3).is_err());
        assert!(make_folds(&quarters(3), 0).is_err());
    }

    proptest! {
        #[test]
        fn split_and_fold_ordering(n in 4usize..80, a in 1usize..30, b in 1usize..10, c in 1usize..10, k in 1usize..8) {
            let q = quarters(n);
            if let Ok(s) = make_chrono_split(&q, a, b, c) {
                prop_assert!(s.train_quarters.last() < s.val_quarters.first());
                prop_assert!(s.val_quarters.last() < s.test_quarters.first());
                prop_assert_eq!(s.test_quarters.last(), q.last());
            } else {
                prop_assert!(a + b + c > n);
            }
            if let Ok(plan) = make_folds(&q, k) {
                for (i, f) in plan.folds.iter().enumerate() {
                    prop_assert!(f.train_quarters.last() < f.test_quarters.first());
                    if i > 0 {
                        prop_assert!(f.train_quarters.len() > plan.folds[i - 1].train_quarters.len());
                        prop_assert!(f.train_quarters.starts_with(&plan.folds[i - 1].train_quarters));
                    }
                }
            } else {
                prop_assert!(n < k + 1);
            }
        }
    }

    #[test]
    fn all_positive_predictions() {
        let truth = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let m = score(&truth, &[1; 10]).unwrap();
        assert!((m.precision[1] - 0.6).abs() < 1e-15);
        assert_eq!(m.recall[1], 1.0);
        assert!((m.f1_positive - 0.75).abs() < 1e-15);
        assert_eq!(m.recall[0], 0.0);
        assert_eq!(m.confusion.total(), 10);
    }

    #[test]
    fn degenerate_scores() {
        assert_eq!(score(&[1, 0], &[1, 0]).unwrap().f1_positive, 1.0);
        assert_eq!(score(&[1, 1], &[0, 0]).unwrap().f1_positive, 0.0);
        assert!(score(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn tie_break_prefers_cheaper() {
        let row = |n, d, m, f| GridRow {
            params: GridParams { n_estimators: n, max_depth: d, min_samples_split: m },
            fold_f1: vec![f],
            mean_f1: f,
        };
        let table = vec![
            row(300, Some(10), 2, 0.8),
            row(100, None, 2, 0.8),
            row(100, Some(20), 2, 0.8),
            row(100, Some(20), 10, 0.8),
            row(100, Some(20), 5, 0.8),
            row(200, Some(10), 10, 0.7),
        ];
        assert_eq!(select_best(&table).unwrap().params, table[3].params);
        let mut better = table.clone();
        better.push(row(300, None, 2, 0.8 + 1e-9));
        assert_eq!(select_best(&better).unwrap().params.n_estimators, 300);
    }

    fn noisy_threshold(n_q: usize, per_q: usize, seed: u64) -> (Array2<f64>, Vec<u8>, Vec<NaiveDate>) {
        let q = quarters(n_q);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_q * per_q;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let y = (0..n).map(|i| u8::from(x[[i, 0]] + 0.5 * x[[i, 1]] + rng.random_range(-0.3..0.3) > 0.0)).collect();
        let rq = (0..n).map(|i| q[i / per_q]).collect();
        (x, y, rq)
    }

    #[test]
    fn grid_returns_table_maximum() {
        let (x, y, rq) = noisy_threshold(8, 40, 3);
        let grid = HyperGrid {
            n_estimators: vec![5, 15],
            max_depth: vec![None, Some(2)],
            min_samples_split: vec![2, 20],
        };
        let folds = make_folds(&quarters(8), 3).unwrap();
        let base = ForestSettings { seed: 4, ..Default::default() };
        let r = grid_search(x.view(), &y, &rq, &grid, &folds, &base).unwrap();
        assert_eq!(r.table.len(), 8);
        assert!(r.table.iter().all(|row| row.mean_f1 <= r.best_mean_f1));
        // each cell equals a directly trained forest
        let cell = &r.table[5];
        let fold = &folds.folds[1];
        let tr: Vec<usize> = (0..y.len()).filter(|&i| fold.train_quarters.contains(&rq[i])).collect();
        let te: Vec<usize> = (0..y.len()).filter(|&i| fold.test_quarters.contains(&rq[i])).collect();
        let s = ForestSettings {
            n_estimators: cell.params.n_estimators,
            max_depth: cell.params.max_depth,
            min_samples_split: cell.params.min_samples_split,
            ..base
        };
        let ytr: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
        let f = crate::learners::train_forest(x.select(Axis(0), &tr).view(), &ytr, &s).unwrap();
        let pred: Vec<u8> = f.predict_proba(x.select(Axis(0), &te).view()).into_iter().map(label).collect();
        let yte: Vec<u8> = te.iter().map(|&i| y[i]).collect();
        assert_eq!(score(&yte, &pred).unwrap().f1_positive, cell.fold_f1[1]);
    }

    #[test]
    fn single_combination_and_empty_grid() {
        let (x, y, rq) = noisy_threshold(4, 20, 1);
        let folds = make_folds(&quarters(4), 1).unwrap();
        let grid = HyperGrid { n_estimators: vec![3], max_depth: vec![Some(3)], min_samples_split: vec![2] };
        let r = grid_search(x.view(), &y, &rq, &grid, &folds, &ForestSettings::default()).unwrap();
        assert_eq!(r.best, grid.combinations()[0]);
        let empty = HyperGrid { n_estimators: vec![], ..grid };
        assert!(matches!(
            grid_search(x.view(), &y, &rq, &empty, &folds, &ForestSettings::default()),
            Err(EvalError::Grid(_))
        ));
    }
}
