//! Point-in-time feature engineering.
//!
//! Every engineered value for firm `i` at quarter `t` is computed from the
//! firm's records strictly before `t` plus the calendar date `t` itself.
//! Fitted statistics (correlations, standardization, category vocabularies)
//! only ever see rows selected by a training mask.

mod engineer;
mod export;
mod impute;
mod prune;
mod transform;

pub use engineer::{
    add_datetime_features, add_growth_factor, add_lag_features, add_last_quarter_positive,
    engineer, sic_division, DateParts, EngineeredPanel, ExcludedRow, LAG_FIELDS,
};
pub use export::write_matrix_csv;
pub use impute::{impute_rolling_mean, ColumnImputation, ImputationReport};
pub use prune::{pearson, prune_collinear, DropReason, DroppedColumn};
pub use transform::{fit_transform, TransformState};

use chrono::NaiveDate;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("training mask has {mask} entries but the matrix has {rows} rows")]
    MaskLength { mask: usize, rows: usize },
    #[error("no training rows selected")]
    NoTrainingRows,
    #[error("prune threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("column {0:?} required by the transform is absent")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub quarter_end: NaiveDate,
    pub permno: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    OneHot,
    BinaryFlag,
    DatetimePart,
    Lag,
    Growth,
}

impl ColumnKind {
    /// Kinds that are standardized and take part in collinearity pruning.
    pub fn is_continuous(self) -> bool {
        matches!(
            self,
            ColumnKind::Numeric | ColumnKind::DatetimePart | ColumnKind::Lag | ColumnKind::Growth
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    pub source: String,
    pub lag_quarters: u32,
}

impl ColumnMeta {
    pub fn new(name: impl Into<String>, kind: ColumnKind, source: impl Into<String>, lag: u32) -> Self {
        ColumnMeta {
            name: name.into(),
            kind,
            source: source.into(),
            lag_quarters: lag,
        }
    }
}

/// Dense rows-by-columns matrix with row keys and column metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub row_keys: Vec<RowKey>,
    pub columns: Vec<ColumnMeta>,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn select_columns(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            row_keys: self.row_keys.clone(),
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            values: self.values.select(Axis(1), idx),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            row_keys: idx.iter().map(|&i| self.row_keys[i]).collect(),
            columns: self.columns.clone(),
            values: self.values.select(Axis(0), idx),
        }
    }
}

pub(crate) fn check_mask(mask: &[bool], rows: usize) -> Result<Vec<usize>, FeatureError> {
    if mask.len() != rows {
        return Err(FeatureError::MaskLength {
            mask: mask.len(),
            rows,
        });
    }
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(FeatureError::NoTrainingRows);
    }
    Ok(idx)
}
