//! Exact Shapley attributions for forests under the path-dependent
//! (cover-weighted) conditional expectation, plus a brute-force oracle and
//! summary reports.

use std::io::Write;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_lab::RowKey;
use crate::learners::{DecisionTree, ForestModel, Node};

/// Default feature limit for [`brute_force_shap`].
pub const BRUTE_FORCE_MAX_FEATURES: usize = 8;

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("model expects {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("tree {tree} node {node} has zero cover")]
    ZeroCover { tree: usize, node: usize },
    #[error("forest has no trees")]
    NoTrees,
    #[error("{features} features exceed the brute-force limit of {limit}")]
    TooManyFeatures { features: usize, limit: usize },
    #[error("no rows to summarize")]
    EmptySample,
    #[error("{names} feature names for {features} features")]
    Names { names: usize, features: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapVector {
    pub row_key: Option<RowKey>,
    pub phi: Vec<f64>,
    pub base_value: f64,
}

impl ShapVector {
    /// `base_value + sum(phi)`, which equals the model output for the row.
    pub fn reconstructed(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

fn check_forest(model: &ForestModel, width: usize) -> Result<(), ShapError> {
    if model.trees.is_empty() {
        return Err(ShapError::NoTrees);
    }
    if width != model.n_features {
        return Err(ShapError::Dimension { expected: model.n_features, got: width });
    }
    for (t, tree) in model.trees.iter().enumerate() {
        if let Some(node) = tree.nodes.iter().position(|n| n.cover() <= 0.0) {
            return Err(ShapError::ZeroCover { tree: t, node });
        }
    }
    Ok(())
}

fn node_value(node: &Node) -> f64 {
    match node {
        Node::Leaf { probability, .. } => *probability,
        Node::Split { counts, cover, .. } => counts[1] / cover,
    }
}

/// Cover-weighted mean leaf value of the tree.
pub fn expected_value(tree: &DecisionTree) -> f64 {
    fn walk(nodes: &[Node], i: usize) -> f64 {
        match &nodes[i] {
            Node::Split { left, right, cover, .. } => {
                let (l, r) = (&nodes[*left], &nodes[*right]);
                (l.cover() * walk(nodes, *left) + r.cover() * walk(nodes, *right)) / cover
            }
            leaf => node_value(leaf),
        }
    }
    walk(&tree.nodes, 0)
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: usize,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: usize) {
    let depth = path.len();
    path.push(PathElem { feature, zero, one, weight: if depth == 0 { 1.0 } else { 0.0 } });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let w = path[i].weight;
        path[i + 1].weight += one * w * (i as f64 + 1.0) / (d + 1.0);
        path[i].weight = zero * w * (d - i as f64) / (d + 1.0);
    }
}

fn unwind(path: &mut Vec<PathElem>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElem { one, zero, .. } = path[index];
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            next = tmp - path[i].weight * zero * (d - i as f64) / (d + 1.0);
        } else {
            path[i].weight = path[i].weight * (d + 1.0) / (zero * (d - i as f64));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

fn unwound_sum(path: &[PathElem], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElem { one, zero, .. } = path[index];
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i as f64) / (d + 1.0);
        } else {
            total += path[i].weight / zero / ((d - i as f64) / (d + 1.0));
        }
    }
    total
}

const ROOT_FEATURE: usize = usize::MAX;

fn recurse(
    nodes: &[Node],
    i: usize,
    row: &[f64],
    phi: &mut [f64],
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: usize,
) {
    extend(&mut path, zero, one, feature);
    match &nodes[i] {
        Node::Leaf { probability, .. } => {
            for k in 1..path.len() {
                let w = unwound_sum(&path, k);
                phi[path[k].feature] += w * (path[k].one - path[k].zero) * probability;
            }
        }
        Node::Split { feature: f, threshold, left, right, cover, .. } => {
            let (hot, cold) = if row[*f] <= *threshold { (*left, *right) } else { (*right, *left) };
            let (mut in_zero, mut in_one) = (1.0, 1.0);
            if let Some(k) = (1..path.len()).find(|&k| path[k].feature == *f) {
                in_zero = path[k].zero;
                in_one = path[k].one;
                unwind(&mut path, k);
            }
            let hot_frac = nodes[hot].cover() / cover;
            let cold_frac = nodes[cold].cover() / cover;
            recurse(nodes, hot, row, phi, path.clone(), hot_frac * in_zero, in_one, *f);
            recurse(nodes, cold, row, phi, path, cold_frac * in_zero, 0.0, *f);
        }
    }
}

/// Shapley values of one tree's probability output; returns `(phi, base)`.
pub fn tree_shap_single(tree: &DecisionTree, row: &[f64]) -> (Vec<f64>, f64) {
    let mut phi = vec![0.0; tree.n_features];
    recurse(&tree.nodes, 0, row, &mut phi, Vec::with_capacity(32), 1.0, 1.0, ROOT_FEATURE);
    (phi, expected_value(tree))
}

/// Forest attribution: mean of per-tree values.
pub fn tree_shap(model: &ForestModel, row: &[f64]) -> Result<ShapVector, ShapError> {
    check_forest(model, row.len())?;
    let mut phi = vec![0.0; model.n_features];
    let mut base = 0.0;
    for tree in &model.trees {
        let (p, b) = tree_shap_single(tree, row);
        for (acc, v) in phi.iter_mut().zip(p) {
            *acc += v;
        }
        base += b;
    }
    let n = model.trees.len() as f64;
    phi.iter_mut().for_each(|v| *v /= n);
    Ok(ShapVector { row_key: None, phi, base_value: base / n })
}

/// Expected tree output when only the features in `known` (a bit mask)
/// follow the row; other splits average their children by cover.
pub fn conditional_expectation(tree: &DecisionTree, row: &[f64], known: u64) -> f64 {
    fn walk(nodes: &[Node], i: usize, row: &[f64], known: u64) -> f64 {
        match &nodes[i] {
            Node::Split { feature, threshold, left, right, cover, .. } => {
                if known >> feature & 1 == 1 {
                    let next = if row[*feature] <= *threshold { *left } else { *right };
                    walk(nodes, next, row, known)
                } else {
                    (nodes[*left].cover() * walk(nodes, *left, row, known)
                        + nodes[*right].cover() * walk(nodes, *right, row, known))
                        / cover
                }
            }
            leaf => node_value(leaf),
        }
    }
    walk(&tree.nodes, 0, row, known)
}

/// Shapley values by enumerating every feature subset; refuses models wider
/// than `max_features` (callers normally pass [`BRUTE_FORCE_MAX_FEATURES`]).
pub fn brute_force_shap(model: &ForestModel, row: &[f64], max_features: usize) -> Result<ShapVector, ShapError> {
    let p = model.n_features;
    let limit = max_features.min(63);
    if p > limit {
        return Err(ShapError::TooManyFeatures { features: p, limit });
    }
    check_forest(model, row.len())?;
    let n_sets = 1usize << p;
    let value: Vec<f64> = (0..n_sets as u64)
        .map(|s| {
            model.trees.iter().map(|t| conditional_expectation(t, row, s)).sum::<f64>() / model.trees.len() as f64
        })
        .collect();
    let fact: Vec<f64> = (0..=p).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    }).collect();
    let mut phi = vec![0.0; p];
    for (i, out) in phi.iter_mut().enumerate() {
        for s in 0..n_sets {
            if s >> i & 1 == 1 {
                continue;
            }
            let size = (s as u64).count_ones() as usize;
            let w = fact[size] * fact[p - size - 1] / fact[p];
            *out += w * (value[s | 1 << i] - value[s]);
        }
    }
    Ok(ShapVector { row_key: None, phi, base_value: value[0] })
}

/// Attributions for every row of `x`, in row order.
pub fn explain_rows(model: &ForestModel, x: ArrayView2<f64>, keys: Option<&[RowKey]>) -> Result<Vec<ShapVector>, ShapError> {
    check_forest(model, x.ncols())?;
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out: Vec<ShapVector> = rows.par_iter().map(|r| tree_shap(model, r)).collect::<Result<_, _>>()?;
    if let Some(keys) = keys {
        for (v, k) in out.iter_mut().zip(keys) {
            v.row_key = Some(*k);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs_phi: f64,
    /// Fraction of rows with phi > 0.
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub n_rows: usize,
    pub base_value: f64,
    /// Descending by mean |phi|, ties by feature name.
    pub ranking: Vec<FeatureImportance>,
}

impl ShapSummary {
    pub fn rank_of(&self, feature: &str) -> Option<usize> {
        self.ranking.iter().position(|f| f.feature == feature)
    }
}

pub fn summarize(vectors: &[ShapVector], names: &[String]) -> Result<ShapSummary, ShapError> {
    let Some(first) = vectors.first() else {
        return Err(ShapError::EmptySample);
    };
    let p = first.phi.len();
    if names.len() != p {
        return Err(ShapError::Names { names: names.len(), features: p });
    }
    let n = vectors.len() as f64;
    let mut ranking: Vec<FeatureImportance> = (0..p)
        .map(|j| FeatureImportance {
            feature: names[j].clone(),
            mean_abs_phi: vectors.iter().map(|v| v.phi[j].abs()).sum::<f64>() / n,
            positive_fraction: vectors.iter().filter(|v| v.phi[j] > 0.0).count() as f64 / n,
        })
        .collect();
    ranking.sort_by(|a, b| b.mean_abs_phi.total_cmp(&a.mean_abs_phi).then_with(|| a.feature.cmp(&b.feature)));
    Ok(ShapSummary {
        n_rows: vectors.len(),
        base_value: first.base_value,
        ranking,
    })
}

pub fn shap_summary(model: &ForestModel, rows: ArrayView2<f64>, names: &[String]) -> Result<ShapSummary, ShapError> {
    if rows.nrows() == 0 {
        return Err(ShapError::EmptySample);
    }
    summarize(&explain_rows(model, rows, None)?, names)
}

/// Long-format CSV: `permno,quarter_end,feature,phi,base_value`.
pub fn write_shap_csv(vectors: &[ShapVector], names: &[String], mut out: impl Write) -> Result<(), ShapError> {
    writeln!(out, "permno,quarter_end,feature,phi,base_value")?;
    for v in vectors {
        if v.phi.len() != names.len() {
            return Err(ShapError::Names { names: names.len(), features: v.phi.len() });
        }
        let (permno, date) = match &v.row_key {
            Some(k) => (k.permno.to_string(), k.quarter_end.to_string()),
            None => (String::new(), String::new()),
        };
        for (name, phi) in names.iter().zip(&v.phi) {
            writeln!(out, "{permno},{date},{name},{phi:e},{:e}", v.base_value)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{train_forest, ForestSettings};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn forest_of(trees: Vec<DecisionTree>, p: usize) -> ForestModel {
        ForestModel {
            n_estimators: trees.len(),
            trees,
            features_per_split: p,
            max_depth: None,
            min_samples_split: 2,
            bootstrap: false,
            seed: 0,
            n_features: p,
        }
    }

    fn stump() -> DecisionTree {
        let nodes = vec![
            Node::Split { feature: 0, threshold: 0.0, left: 1, right: 2, counts: [50.0, 50.0], cover: 100.0 },
            Node::leaf([40.0, 10.0]),
            Node::leaf([10.0, 40.0]),
        ];
        DecisionTree::from_nodes(nodes, 3).unwrap()
    }

    #[test]
    fn single_leaf_has_no_attribution() {
        let tree = DecisionTree::from_nodes(vec![Node::leaf([3.0, 1.0])], 2).unwrap();
        let s = tree_shap(&forest_of(vec![tree], 2), &[1.0, 2.0]).unwrap();
        assert_eq!(s.phi, [0.0, 0.0]);
        assert_eq!(s.base_value, 0.25);
    }

    #[test]
    fn stump_going_right() {
        let f = forest_of(vec![stump()], 3);
        let s = tree_shap(&f, &[1.0, 0.0, 0.0]).unwrap();
        assert!((s.phi[0] - 0.3).abs() < 1e-15);
        assert_eq!(&s.phi[1..], [0.0, 0.0]);
        assert!((s.base_value - 0.5).abs() < 1e-15);
        // two coalitions: {} -> 0.5, {0} -> 0.8
        let b = brute_force_shap(&f, &[1.0, 0.0, 0.0], 8).unwrap();
        assert!((b.phi[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let f = forest_of(vec![stump()], 3);
        assert!(matches!(tree_shap(&f, &[1.0]), Err(ShapError::Dimension { .. })));
        let wide = forest_of(vec![DecisionTree::from_nodes(vec![Node::leaf([1.0, 1.0])], 9).unwrap()], 9);
        assert!(matches!(brute_force_shap(&wide, &[0.0; 9], 8), Err(ShapError::TooManyFeatures { .. })));
        let empty = ForestModel { trees: vec![], ..f.clone() };
        assert!(matches!(tree_shap(&empty, &[0.0; 3]), Err(ShapError::NoTrees)));
        let x = Array2::<f64>::zeros((0, 3));
        assert!(matches!(shap_summary(&f, x.view(), &["a".into(), "b".into(), "c".into()]), Err(ShapError::EmptySample)));
    }

    #[test]
    fn duplicate_features_share_credit() {
        // f(a, b) = (a + b) / 2 on binary inputs, equal covers
        let sym = vec![
            Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2, counts: [50.0, 50.0], cover: 100.0 },
            Node::Split { feature: 1, threshold: 0.5, left: 3, right: 4, counts: [37.5, 12.5], cover: 50.0 },
            Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6, counts: [12.5, 37.5], cover: 50.0 },
            Node::leaf([25.0, 0.0]),
            Node::leaf([12.5, 12.5]),
            Node::leaf([12.5, 12.5]),
            Node::leaf([0.0, 25.0]),
        ];
        let f = forest_of(vec![DecisionTree::from_nodes(sym, 2).unwrap()], 2);
        let s = tree_shap(&f, &[1.0, 1.0]).unwrap();
        assert!((s.phi[0] - s.phi[1]).abs() < 1e-12, "{:?}", s.phi);
        assert!((s.reconstructed() - f.predict_row(&[1.0, 1.0])).abs() < 1e-12);
    }

    fn random_forest(rng: &mut ChaCha8Rng) -> (ForestModel, Array2<f64>) {
        let p = rng.random_range(2..=8);
        let n = rng.random_range(20..80);
        let x = Array2::from_shape_fn((n, p), |_| f64::from(rng.random_range(0..6u8)));
        let y: Vec<u8> = (0..n).map(|i| u8::from(x[[i, 0]] + rng.random_range(0.0..4.0) > 4.0)).collect();
        let s = ForestSettings {
            n_estimators: rng.random_range(1..=5),
            max_depth: Some(rng.random_range(1..=4)),
            seed: rng.random(),
            ..Default::default()
        };
        (train_forest(x.view(), &y, &s).unwrap(), x)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn matches_brute_force(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f, x) = random_forest(&mut rng);
            for r in 0..5.min(x.nrows()) {
                let row = x.row(r).to_vec();
                let a = tree_shap(&f, &row).unwrap();
                let b = brute_force_shap(&f, &row, 8).unwrap();
                prop_assert!((a.base_value - b.base_value).abs() <= 1e-9);
                for (u, v) in a.phi.iter().zip(&b.phi) {
                    prop_assert!((u - v).abs() <= 1e-9, "{:?} vs {:?}", a.phi, b.phi);
                }
                prop_assert!((a.reconstructed() - f.predict_row(&row)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn forest_phi_is_mean_of_tree_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, x) = random_forest(&mut rng);
        let row = x.row(0).to_vec();
        let s = tree_shap(&f, &row).unwrap();
        for j in 0..f.n_features {
            let mean = f.trees.iter().map(|t| tree_shap_single(t, &row).0[j]).sum::<f64>() / f.trees.len() as f64;
            assert!((s.phi[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn unused_feature_is_exactly_zero() {
        let f = forest_of(vec![stump(), stump()], 3);
        let s = tree_shap(&f, &[-1.0, 5.0, 7.0]).unwrap();
        assert_eq!(s.phi[1], 0.0);
        assert_eq!(s.phi[2], 0.0);
    }

    #[test]
    fn summary_ranks_and_ties() {
        let v = vec![ShapVector { row_key: None, phi: vec![0.1, -0.3, 0.1], base_value: 0.5 }];
        let names: Vec<String> = ["b", "a", "a2"].iter().map(|s| s.to_string()).collect();
        let s = summarize(&v, &names).unwrap();
        let order: Vec<&str> = s.ranking.iter().map(|f| f.feature.as_str()).collect();
        assert_eq!(order, ["a", "a2", "b"]);
        assert_eq!(s.ranking[0].positive_fraction, 0.0);
        let mut buf = Vec::new();
        write_shap_csv(&v, &names, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
