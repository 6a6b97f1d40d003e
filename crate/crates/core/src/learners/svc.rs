//! Linear support vector classifier trained by subgradient descent on the
//! primal hinge objective.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{check_inputs, LearnerError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvcSettings {
    pub c: f64,
    pub epochs: usize,
    /// Initial step; the step at epoch t is `step_size / sqrt(t + 1)`.
    pub step_size: f64,
}

impl Default for SvcSettings {
    fn default() -> Self {
        SvcSettings {
            c: 1.0,
            epochs: 1000,
            step_size: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvcModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub objective: f64,
}

fn signed(y: u8) -> f64 {
    if y == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Hinge terms `max(0, 1 - y·(w·x + b))` with labels mapped to ±1.
pub fn hinge_terms(x: ArrayView2<f64>, y: &[u8], weights: ArrayView1<f64>, bias: f64) -> Vec<f64> {
    let margins = x.dot(&weights) + bias;
    margins
        .iter()
        .zip(y)
        .map(|(m, &yi)| (1.0 - signed(yi) * m).max(0.0))
        .collect()
}

/// `(1/2)|w|² + c·Σ hinge`.
pub fn svc_objective(x: ArrayView2<f64>, y: &[u8], weights: ArrayView1<f64>, bias: f64, c: f64) -> f64 {
    0.5 * weights.dot(&weights) + c * hinge_terms(x, y, weights, bias).iter().sum::<f64>()
}

/// Minimizes the objective divided by `c·n` (same minimizer, step sizes
/// independent of the sample count) and returns the best iterate seen.
pub fn train_linear_svc(x: ArrayView2<f64>, y: &[u8], settings: &SvcSettings) -> Result<LinearSvcModel, LearnerError> {
    check_inputs(x, y)?;
    if !(settings.c > 0.0 && settings.step_size > 0.0) {
        return Err(LearnerError::InvalidSetting("c and step_size must be > 0".into()));
    }
    let n = x.nrows() as f64;
    let reg = 1.0 / (settings.c * n);
    let ys: Array1<f64> = y.iter().map(|&v| signed(v)).collect();

    let mut w = Array1::<f64>::zeros(x.ncols());
    let mut b = 0.0;
    let mut best = (svc_objective(x, y, w.view(), b, settings.c), w.clone(), b);
    for t in 0..settings.epochs {
        let margins = x.dot(&w) + b;
        // coefficient per row: -y_i/n for margin violators, 0 otherwise
        let coef: Array1<f64> = margins
            .iter()
            .zip(ys.iter())
            .map(|(m, yi)| if yi * m < 1.0 { -yi / n } else { 0.0 })
            .collect();
        let grad_w = x.t().dot(&coef) + &w * reg;
        let grad_b = coef.sum();
        let eta = settings.step_size / ((t + 1) as f64).sqrt();
        w.scaled_add(-eta, &grad_w);
        b -= eta * grad_b;
        let obj = svc_objective(x, y, w.view(), b, settings.c);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
    }
    Ok(LinearSvcModel {
        weights: best.1.to_vec(),
        bias: best.2,
        c: settings.c,
        objective: best.0,
    })
}

impl LinearSvcModel {
    pub fn decision_function(&self, x: ArrayView2<f64>) -> Vec<f64> {
        (x.dot(&ArrayView1::from(&self.weights)) + self.bias).to_vec()
    }

    /// Sigmoid of the margin. A heuristic score, not a calibrated
    /// probability.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Vec<f64> {
        self.decision_function(x)
            .into_iter()
            .map(super::logistic::sigmoid)
            .collect()
    }
}
