//! CART classification trees on binary labels with weighted (bootstrap)
//! samples.

use ndarray::ArrayView2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::rng::derive_seed;

/// Gains within this distance count as ties; the earlier candidate (lower
/// feature index, then lower threshold) is kept.
pub const GAIN_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Weighted class counts [negative, positive] reaching the node.
        counts: [f64; 2],
        /// Weighted training samples reaching the node.
        cover: f64,
    },
    Leaf {
        /// Weighted class counts [negative, positive].
        counts: [f64; 2],
        probability: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }

    /// Weighted class counts reaching the node.
    pub fn counts(&self) -> [f64; 2] {
        match self {
            Node::Split { counts, .. } | Node::Leaf { counts, .. } => *counts,
        }
    }

    pub fn leaf(counts: [f64; 2]) -> Node {
        let cover = counts[0] + counts[1];
        Node::Leaf {
            counts,
            probability: if cover > 0.0 { counts[1] / cover } else { 0.0 },
            cover,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSettings {
    /// `None` grows until purity or the split-size limit.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features drawn per node; `None` evaluates all of them.
    pub features_per_split: Option<usize>,
}

impl Default for TreeSettings {
    fn default() -> Self {
        TreeSettings {
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
        }
    }
}

/// Array-backed tree; node 0 is the root. A row goes left when
/// `x[feature] <= threshold`. Serialized column-wise to keep large forests
/// compact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TreeArrays", try_from = "TreeArrays")]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
}

impl DecisionTree {
    /// Builds a tree from explicit nodes, checking that children exist,
    /// every non-root node has exactly one parent, and leaf probabilities
    /// match their counts.
    pub fn from_nodes(nodes: Vec<Node>, n_features: usize) -> Result<DecisionTree, LearnerError> {
        if nodes.is_empty() {
            return Err(LearnerError::InvalidModel("tree has no nodes".into()));
        }
        let mut parents = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            match node {
                Node::Split { feature, left, right, threshold, counts, cover } => {
                    if (counts[0] + counts[1] - cover).abs() > 1e-9 {
                        return Err(LearnerError::InvalidModel(format!("node {i} cover")));
                    }
                    if *feature >= n_features {
                        return Err(LearnerError::InvalidModel(format!(
                            "node {i} splits on feature {feature} of {n_features}"
                        )));
                    }
                    if !threshold.is_finite() {
                        return Err(LearnerError::InvalidModel(format!("node {i} threshold")));
                    }
                    for c in [*left, *right] {
                        if c >= nodes.len() || c == 0 {
                            return Err(LearnerError::InvalidModel(format!(
                                "node {i} has invalid child {c}"
                            )));
                        }
                        parents[c] += 1;
                    }
                }
                Node::Leaf { counts, probability, cover } => {
                    let total = counts[0] + counts[1];
                    let expect = if total > 0.0 { counts[1] / total } else { 0.0 };
                    if !(0.0..=1.0).contains(probability)
                        || (probability - expect).abs() > 1e-12
                        || (cover - total).abs() > 1e-9
                    {
                        return Err(LearnerError::InvalidModel(format!(
                            "leaf {i} probability disagrees with its counts"
                        )));
                    }
                }
            }
        }
        if parents.iter().skip(1).any(|&p| p != 1) {
            return Err(LearnerError::InvalidModel("nodes do not form a tree".into()));
        }
        Ok(DecisionTree {
            nodes,
            n_features,
            max_depth: None,
            min_samples_split: 2,
        })
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(row)] {
            Node::Leaf { probability, .. } => *probability,
            Node::Split { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    /// Prediction of the tree as if it had been grown with the tighter
    /// `max_depth` / `min_samples_split`. Node randomness depends only on
    /// the node's path, so this equals training with those settings.
    pub fn predict_row_truncated(&self, row: &[f64], max_depth: Option<usize>, min_samples_split: usize) -> f64 {
        let mut i = 0;
        let mut depth = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, threshold, left, right, counts, cover } => {
                    if max_depth.is_some_and(|d| depth >= d) || *cover < min_samples_split as f64 {
                        return if *cover > 0.0 { counts[1] / cover } else { 0.0 };
                    }
                    i = if row[*feature] <= *threshold { *left } else { *right };
                    depth += 1;
                }
                Node::Leaf { probability, .. } => return *probability,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeArrays {
    n_features: usize,
    max_depth: Option<usize>,
    min_samples_split: usize,
    /// -1 marks a leaf.
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<usize>,
    right: Vec<usize>,
    negative: Vec<f64>,
    positive: Vec<f64>,
}

impl From<DecisionTree> for TreeArrays {
    fn from(t: DecisionTree) -> TreeArrays {
        let n = t.nodes.len();
        let mut a = TreeArrays {
            n_features: t.n_features,
            max_depth: t.max_depth,
            min_samples_split: t.min_samples_split,
            feature: Vec::with_capacity(n),
            threshold: Vec::with_capacity(n),
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            negative: Vec::with_capacity(n),
            positive: Vec::with_capacity(n),
        };
        for node in &t.nodes {
            let (f, th, l, r) = match node {
                Node::Split { feature, threshold, left, right, .. } => (*feature as i64, *threshold, *left, *right),
                Node::Leaf { .. } => (-1, 0.0, 0, 0),
            };
            let c = node.counts();
            a.feature.push(f);
            a.threshold.push(th);
            a.left.push(l);
            a.right.push(r);
            a.negative.push(c[0]);
            a.positive.push(c[1]);
        }
        a
    }
}

impl TryFrom<TreeArrays> for DecisionTree {
    type Error = LearnerError;

    fn try_from(a: TreeArrays) -> Result<DecisionTree, LearnerError> {
        let n = a.feature.len();
        if [a.threshold.len(), a.left.len(), a.right.len(), a.negative.len(), a.positive.len()].iter().any(|&l| l != n) {
            return Err(LearnerError::InvalidModel("tree arrays differ in length".into()));
        }
        let nodes = (0..n)
            .map(|i| {
                let counts = [a.negative[i], a.positive[i]];
                if a.feature[i] < 0 {
                    Node::leaf(counts)
                } else {
                    Node::Split {
                        feature: a.feature[i] as usize,
                        threshold: a.threshold[i],
                        left: a.left[i],
                        right: a.right[i],
                        counts,
                        cover: counts[0] + counts[1],
                    }
                }
            })
            .collect();
        let mut tree = DecisionTree::from_nodes(nodes, a.n_features)?;
        tree.max_depth = a.max_depth;
        tree.min_samples_split = a.min_samples_split;
        Ok(tree)
    }
}

/// Column-major copy of a training matrix with per-feature dense ranks, so
/// node-level sorting works on integer keys.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    columns: Vec<Vec<f64>>,
    ranks: Vec<Vec<u32>>,
    /// One past the largest rank per feature.
    rank_bound: Vec<u32>,
    labels: Vec<u8>,
}

impl TrainingSet {
    pub fn new(x: ArrayView2<f64>, y: &[u8]) -> Result<TrainingSet, LearnerError> {
        super::check_inputs(x, y)?;
        let n = x.nrows();
        if n > u32::MAX as usize {
            return Err(LearnerError::InvalidSetting("too many rows".into()));
        }
        let columns: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
        let ranks: Vec<Vec<u32>> = columns
            .iter()
            .map(|col| {
                let mut order: Vec<u32> = (0..n as u32).collect();
                order.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
                let mut rank = vec![0u32; n];
                let mut r = 0u32;
                for k in 0..n {
                    if k > 0 && col[order[k] as usize] != col[order[k - 1] as usize] {
                        r += 1;
                    }
                    rank[order[k] as usize] = r;
                }
                rank
            })
            .collect();
        let rank_bound = ranks
            .iter()
            .map(|r| r.iter().copied().max().map_or(0, |m| m + 1))
            .collect();
        Ok(TrainingSet {
            columns,
            ranks,
            rank_bound,
            labels: y.to_vec(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Gini impurity of a binary node from weighted class counts.
pub fn gini(neg: f64, pos: f64) -> f64 {
    let n = neg + pos;
    if n <= 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

/// Weighted impurity decrease of splitting `parent` into `left` and the
/// remainder.
pub fn gini_gain(parent: [f64; 2], left: [f64; 2]) -> f64 {
    let right = [parent[0] - left[0], parent[1] - left[1]];
    let n = parent[0] + parent[1];
    let nl = left[0] + left[1];
    let nr = right[0] + right[1];
    gini(parent[0], parent[1]) - (nl * gini(left[0], left[1]) + nr * gini(right[0], right[1])) / n
}

/// Midpoint threshold that keeps `lo` on the left and `hi` on the right.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

/// Best Gini split of the node holding `rows` (with per-row `weights`) over
/// `candidates`, scanning features in ascending index order and thresholds
/// at midpoints between consecutive distinct values. `None` when every
/// candidate is constant on the node.
pub fn best_split(
    data: &TrainingSet,
    rows: &[u32],
    weights: &[f64],
    candidates: &[usize],
) -> Option<Split> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    best_split_with(data, rows, weights, &sorted, &mut Scratch::default())
}

#[derive(Default)]
struct Scratch {
    keys: Vec<u64>,
    buf: Vec<u64>,
}

/// Nodes at least this large are sorted by radix passes over the rank bits.
const RADIX_MIN: usize = 256;

/// Sorts `keys` by their upper 32 bits (a dense rank below `rank_bound`).
/// LSD radix passes are stable, so equal ranks keep the input order.
fn sort_by_rank(keys: &mut Vec<u64>, buf: &mut Vec<u64>, rank_bound: u32) {
    if keys.len() < RADIX_MIN {
        keys.sort_unstable();
        return;
    }
    let bits = 32 - rank_bound.max(1).leading_zeros();
    let passes = bits.div_ceil(8);
    buf.clear();
    buf.resize(keys.len(), 0);
    for pass in 0..passes {
        let shift = 32 + 8 * pass;
        let mut counts = [0usize; 257];
        for &k in keys.iter() {
            counts[((k >> shift) & 0xFF) as usize + 1] += 1;
        }
        for i in 0..256 {
            counts[i + 1] += counts[i];
        }
        for &k in keys.iter() {
            let b = ((k >> shift) & 0xFF) as usize;
            buf[counts[b]] = k;
            counts[b] += 1;
        }
        std::mem::swap(keys, buf);
    }
}

fn best_split_with(
    data: &TrainingSet,
    rows: &[u32],
    weights: &[f64],
    candidates: &[usize],
    scratch: &mut Scratch,
) -> Option<Split> {
    let parent = class_weights(data, rows, weights);
    let total = parent[0] + parent[1];
    // gain = gini(parent) - 1 + (sum_l c^2 / n_l + sum_r c^2 / n_r) / n
    let base = gini(parent[0], parent[1]) - 1.0;
    let inv_total = 1.0 / total;
    let mut best: Option<Split> = None;
    for &f in candidates {
        let rank = &data.ranks[f];
        let keys = &mut scratch.keys;
        keys.clear();
        keys.extend(rows.iter().map(|&r| (u64::from(rank[r as usize]) << 32) | u64::from(r)));
        sort_by_rank(keys, &mut scratch.buf, data.rank_bound[f]);
        let mut left = [0.0, 0.0];
        for k in 0..keys.len() - 1 {
            let r = (keys[k] & 0xFFFF_FFFF) as usize;
            let w = weights[r];
            left[data.labels[r] as usize] += w;
            let this_rank = keys[k] >> 32;
            let next_rank = keys[k + 1] >> 32;
            if this_rank == next_rank {
                continue;
            }
            let nl = left[0] + left[1];
            if nl <= 0.0 || nl >= total {
                continue;
            }
            let (r0, r1) = (parent[0] - left[0], parent[1] - left[1]);
            let gain = base
                + ((left[0] * left[0] + left[1] * left[1]) / nl + (r0 * r0 + r1 * r1) / (total - nl))
                    * inv_total;
            if best.is_none_or(|b| gain > b.gain + GAIN_TIE_EPS) {
                let next = (keys[k + 1] & 0xFFFF_FFFF) as usize;
                let col = &data.columns[f];
                best = Some(Split {
                    feature: f,
                    threshold: midpoint(col[r], col[next]),
                    gain,
                });
            }
        }
    }
    best
}

fn class_weights(data: &TrainingSet, rows: &[u32], weights: &[f64]) -> [f64; 2] {
    let mut c = [0.0, 0.0];
    for &r in rows {
        c[data.labels[r as usize] as usize] += weights[r as usize];
    }
    c
}

/// Grows a tree on the rows with positive weight. One draw from `rng` seeds
/// the tree; each node then samples its candidate features from a stream
/// keyed by its path from the root.
pub fn grow_tree<R: Rng>(
    data: &TrainingSet,
    weights: &[f64],
    settings: &TreeSettings,
    rng: &mut R,
) -> Result<DecisionTree, LearnerError> {
    if settings.min_samples_split < 2 {
        return Err(LearnerError::InvalidSetting("min_samples_split must be >= 2".into()));
    }
    let mut rows: Vec<u32> = (0..data.n_rows() as u32)
        .filter(|&r| weights[r as usize] > 0.0)
        .collect();
    if rows.is_empty() {
        return Err(LearnerError::Empty);
    }
    let p = data.n_features();
    let k = settings.features_per_split.unwrap_or(p).clamp(1, p.max(1));
    let mut builder = Builder {
        data,
        weights,
        settings,
        k,
        nodes: Vec::new(),
        scratch: Scratch::default(),
    };
    let n = rows.len();
    let root_seed = rng.random::<u64>();
    builder.grow(&mut rows, 0, n, 0, root_seed);
    Ok(DecisionTree {
        nodes: builder.nodes,
        n_features: p,
        max_depth: settings.max_depth,
        min_samples_split: settings.min_samples_split,
    })
}

struct Builder<'a> {
    data: &'a TrainingSet,
    weights: &'a [f64],
    settings: &'a TreeSettings,
    k: usize,
    nodes: Vec<Node>,
    scratch: Scratch,
}

impl Builder<'_> {
    fn grow(&mut self, rows: &mut [u32], start: usize, end: usize, depth: usize, seed: u64) -> usize {
        let slice = &rows[start..end];
        let counts = class_weights(self.data, slice, self.weights);
        let cover = counts[0] + counts[1];
        let id = self.nodes.len();
        self.nodes.push(Node::leaf(counts));

        let pure = counts[0] <= 0.0 || counts[1] <= 0.0;
        let depth_capped = self.settings.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || cover < self.settings.min_samples_split as f64 {
            return id;
        }
        let p = self.data.n_features();
        let candidates: Vec<usize> = if self.k >= p {
            (0..p).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = index::sample(&mut rng, p, self.k).into_vec();
            c.sort_unstable();
            c
        };
        let Some(split) = best_split_with(self.data, slice, self.weights, &candidates, &mut self.scratch)
        else {
            return id;
        };

        // in-place partition: left block first
        let col = &self.data.columns[split.feature];
        let seg = &mut rows[start..end];
        let mut mid = 0;
        for i in 0..seg.len() {
            if col[seg[i] as usize] <= split.threshold {
                seg.swap(i, mid);
                mid += 1;
            }
        }
        let mid = start + mid;
        debug_assert!(mid > start && mid < end);

        let left = self.grow(rows, start, mid, depth + 1, derive_seed(seed, 1));
        let right = self.grow(rows, mid, end, depth + 1, derive_seed(seed, 2));
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            counts,
            cover,
        };
        id
    }
}
