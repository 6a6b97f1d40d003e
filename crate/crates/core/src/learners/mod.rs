//! From-scratch classifiers: L2 logistic regression, random forest of CART
//! trees, and a linear SVC.

mod forest;
mod logistic;
mod svc;
pub mod tree;

pub use forest::{default_features_per_split, fit_forest, train_forest, ForestModel, ForestSettings};
pub use logistic::{loss_and_gradient, sigmoid, train_logistic, LogisticModel, LogisticSettings};
pub use svc::{hinge_terms, svc_objective, train_linear_svc, LinearSvcModel, SvcSettings};
pub use tree::{best_split, gini, gini_gain, DecisionTree, Node, Split, TrainingSet, TreeSettings};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability at or above which a row is labeled positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Version tag written into serialized model documents.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("training set is empty")]
    Empty,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("labels must be 0 or 1")]
    BadLabel,
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("model expects {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model document: {0}")]
    Serde(#[from] serde_json::Error),
}

pub(crate) fn check_inputs(x: ArrayView2<f64>, y: &[u8]) -> Result<(), LearnerError> {
    if x.nrows() != y.len() {
        return Err(LearnerError::LabelCount {
            rows: x.nrows(),
            labels: y.len(),
        });
    }
    if x.nrows() == 0 {
        return Err(LearnerError::Empty);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFinite);
    }
    if y.iter().any(|&v| v > 1) {
        return Err(LearnerError::BadLabel);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Logistic(LogisticModel),
    Forest(ForestModel),
    LinearSvc(LinearSvcModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub labels: Vec<u8>,
}

impl TrainedModel {
    pub fn n_features(&self) -> usize {
        match self {
            TrainedModel::Logistic(m) => m.weights.len(),
            TrainedModel::Forest(m) => m.n_features,
            TrainedModel::LinearSvc(m) => m.weights.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainedModel::Logistic(_) => "logistic_regression",
            TrainedModel::Forest(_) => "random_forest",
            TrainedModel::LinearSvc(_) => "linear_svc",
        }
    }

    /// `{"format_version": 1, "model": {...}}`.
    pub fn to_json(&self) -> Result<String, LearnerError> {
        Ok(serde_json::to_string(&ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<TrainedModel, LearnerError> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(LearnerError::InvalidModel(format!(
                "unsupported format version {}",
                doc.format_version
            )));
        }
        Ok(doc.model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    model: TrainedModel,
}

pub fn label(probability: f64) -> u8 {
    u8::from(probability >= DECISION_THRESHOLD)
}

pub fn predict(model: &TrainedModel, x: ArrayView2<f64>) -> Result<Prediction, LearnerError> {
    if x.ncols() != model.n_features() {
        return Err(LearnerError::Dimension {
            expected: model.n_features(),
            got: x.ncols(),
        });
    }
    let probabilities = match model {
        TrainedModel::Logistic(m) => m.predict_proba(x),
        TrainedModel::Forest(m) => m.predict_proba(x),
        TrainedModel::LinearSvc(m) => m.predict_proba(x),
    };
    let labels = probabilities.iter().map(|&p| label(p)).collect();
    Ok(Prediction {
        probabilities,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn leaf_tree(p: f64) -> DecisionTree {
        DecisionTree::from_nodes(vec![Node::leaf([10.0 * (1.0 - p), 10.0 * p])], 1).unwrap()
    }

    fn forest(trees: Vec<DecisionTree>) -> ForestModel {
        ForestModel {
            n_estimators: trees.len(),
            trees,
            features_per_split: 1,
            max_depth: None,
            min_samples_split: 2,
            bootstrap: true,
            seed: 0,
            n_features: 1,
        }
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(label(0.6), 1);
        assert_eq!(label(0.5), 1);
        assert_eq!(label(0.4999), 0);
    }

    #[test]
    fn forest_tie_goes_positive() {
        let m = TrainedModel::Forest(forest(vec![leaf_tree(0.2), leaf_tree(0.8)]));
        let p = predict(&m, array![[3.0]].view()).unwrap();
        assert!((p.probabilities[0] - 0.5).abs() < 1e-12);
        assert_eq!(p.labels, vec![1]);
    }

    #[test]
    fn width_mismatch() {
        let m = TrainedModel::Forest(forest(vec![leaf_tree(0.2)]));
        assert!(matches!(
            predict(&m, array![[1.0, 2.0]].view()),
            Err(LearnerError::Dimension { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]];
        let y = [0, 0, 1, 1];
        let models = vec![
            TrainedModel::Forest(train_forest(x.view(), &y, &ForestSettings { n_estimators: 3, ..Default::default() }).unwrap()),
            TrainedModel::Logistic(train_logistic(x.view(), &y, &LogisticSettings { epochs: 20, ..Default::default() }).unwrap()),
            TrainedModel::LinearSvc(train_linear_svc(x.view(), &y, &SvcSettings { epochs: 20, ..Default::default() }).unwrap()),
        ];
        for m in models {
            let back = TrainedModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(predict(&m, x.view()).unwrap(), predict(&back, x.view()).unwrap());
            if matches!(m, TrainedModel::Forest(_)) {
                assert_eq!(back, m);
            }
        }
        let broken = r#"{"format_version": 1, "model": {"kind": "forest", "trees": [{"n_features": 1, "max_depth": null,
            "min_samples_split": 2, "feature": [-1], "threshold": [], "left": [0], "right": [0], "negative": [1], "positive": [0]}],
            "n_estimators": 1, "features_per_split": 1, "max_depth": null, "min_samples_split": 2, "bootstrap": false, "seed": 0, "n_features": 1}}"#;
        assert!(TrainedModel::from_json(broken).is_err());
        assert!(TrainedModel::from_json(&broken.replace("\"threshold\": []", "\"threshold\": [0]")).is_ok());
        assert!(TrainedModel::from_json(r#"{"format_version": 9, "model": {"kind": "linear_svc", "weights": [], "bias": 0, "c": 1, "objective": 0}}"#).is_err());
    }

    #[test]
    fn predict_does_not_mutate() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let m = TrainedModel::Forest(train_forest(x.view(), &[0, 0, 1, 1], &ForestSettings { n_estimators: 4, ..Default::default() }).unwrap());
        let before = m.clone();
        predict(&m, x.view()).unwrap();
        assert_eq!(m, before);
    }
}
