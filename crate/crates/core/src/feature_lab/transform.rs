use std::collections::BTreeSet;

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    check_mask, ColumnKind, ColumnMeta, DropReason, DroppedColumn, EngineeredPanel, FeatureError,
    FeatureMatrix,
};

/// Statistics frozen on the training rows. Applying the state to any split
/// uses exactly these values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformState {
    /// Input columns carried over, in order.
    pub retained: Vec<ColumnMeta>,
    /// Per retained column; binary columns keep mean 0 and sd 1.
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub industry_vocab: Vec<String>,
    pub dropped: Vec<String>,
}

/// Fits standardization and the industry vocabulary on `training_rows` of
/// `engineered`, whose matrix may already be pruned. Returns the
/// transformed matrix for all rows together with the frozen state.
pub fn fit_transform(
    engineered: &EngineeredPanel,
    training_rows: &[bool],
) -> Result<(FeatureMatrix, TransformState, Vec<DroppedColumn>), FeatureError> {
    let matrix = &engineered.matrix;
    let idx = check_mask(training_rows, matrix.n_rows())?;
    let n = idx.len() as f64;

    let mut retained = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    let mut dropped = Vec::new();
    for (j, meta) in matrix.columns.iter().enumerate() {
        if !meta.kind.is_continuous() {
            retained.push(meta.clone());
            means.push(0.0);
            sds.push(1.0);
            continue;
        }
        let col = matrix.values.column(j);
        let mean = idx.iter().map(|&i| col[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (col[i] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd == 0.0 || !sd.is_finite() {
            warn!("dropping column {} with zero training variance", meta.name);
            dropped.push(DroppedColumn {
                name: meta.name.clone(),
                reason: DropReason::ZeroVariance,
            });
            continue;
        }
        retained.push(meta.clone());
        means.push(mean);
        sds.push(sd);
    }

    let vocab: BTreeSet<String> = idx
        .iter()
        .filter_map(|&i| engineered.industry[i].clone())
        .collect();

    let state = TransformState {
        retained,
        means,
        sds,
        industry_vocab: vocab.into_iter().collect(),
        dropped: dropped.iter().map(|d| d.name.clone()).collect(),
    };
    let out = state.apply(engineered)?;
    Ok((out, state, dropped))
}

impl TransformState {
    pub fn output_columns(&self) -> Vec<ColumnMeta> {
        let mut cols = self.retained.clone();
        cols.extend(self.industry_vocab.iter().map(|name| {
            ColumnMeta::new(format!("industry={name}"), ColumnKind::OneHot, "sic_code", 1)
        }));
        cols
    }

    /// Transforms every row of `engineered` with the frozen statistics.
    /// Industries outside the vocabulary encode as all zeros.
    pub fn apply(&self, engineered: &EngineeredPanel) -> Result<FeatureMatrix, FeatureError> {
        let src = &engineered.matrix;
        let positions: Vec<usize> = self
            .retained
            .iter()
            .map(|c| {
                src.column_index(&c.name)
                    .ok_or_else(|| FeatureError::MissingColumn(c.name.clone()))
            })
            .collect::<Result<_, _>>()?;
        let columns = self.output_columns();
        let width = columns.len();
        let base = self.retained.len();
        let values = Array2::from_shape_fn((src.n_rows(), width), |(i, j)| {
            if j < base {
                let v = src.values[[i, positions[j]]];
                if self.retained[j].kind.is_continuous() {
                    (v - self.means[j]) / self.sds[j]
                } else {
                    v
                }
            } else {
                let name = &self.industry_vocab[j - base];
                match &engineered.industry[i] {
                    Some(ind) if ind == name => 1.0,
                    _ => 0.0,
                }
            }
        });
        Ok(FeatureMatrix {
            row_keys: src.row_keys.clone(),
            columns,
            values,
        })
    }
}
