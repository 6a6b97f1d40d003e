use log::warn;
use ndarray::ArrayView1;
use serde::Serialize;

use super::{check_mask, FeatureError, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    ZeroVariance,
    Correlated { with: String, r: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedColumn {
    pub name: String,
    #[serde(flatten)]
    pub reason: DropReason,
}

/// Pearson correlation over the rows in `idx`; `None` if either side has
/// zero variance.
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>, idx: &[usize]) -> Option<f64> {
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in idx {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Drops continuous columns whose absolute training-row correlation with an
/// earlier retained column exceeds `threshold`. Columns are visited in
/// matrix order, so the earlier member of a correlated pair survives.
/// Zero-variance columns are dropped as well. One-hot and binary columns
/// pass through untouched.
pub fn prune_collinear(
    matrix: &FeatureMatrix,
    threshold: f64,
    training_rows: &[bool],
) -> Result<(FeatureMatrix, Vec<DroppedColumn>), FeatureError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(FeatureError::Threshold(threshold));
    }
    let idx = check_mask(training_rows, matrix.n_rows())?;
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..matrix.n_cols() {
        let meta = &matrix.columns[j];
        if !meta.kind.is_continuous() {
            kept.push(j);
            continue;
        }
        let col = matrix.values.column(j);
        let first = col[idx[0]];
        if idx.iter().all(|&i| col[i] == first) {
            warn!("dropping zero-variance column {}", meta.name);
            dropped.push(DroppedColumn {
                name: meta.name.clone(),
                reason: DropReason::ZeroVariance,
            });
            continue;
        }
        let clash = kept
            .iter()
            .filter(|&&k| matrix.columns[k].kind.is_continuous())
            .find_map(|&k| {
                let r = pearson(matrix.values.column(k), col, &idx)?;
                (r.abs() > threshold).then_some((k, r))
            });
        match clash {
            Some((k, r)) => dropped.push(DroppedColumn {
                name: meta.name.clone(),
                reason: DropReason::Correlated {
                    with: matrix.columns[k].name.clone(),
                    r,
                },
            }),
            None => kept.push(j),
        }
    }
    Ok((matrix.select_columns(&kept), dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_lab::{ColumnKind, ColumnMeta, RowKey};
    use chrono::NaiveDate;
    use ndarray::Array2;

    fn matrix(cols: &[&[f64]]) -> FeatureMatrix {
        let n = cols[0].len();
        let p = cols.len();
        let values = Array2::from_shape_fn((n, p), |(i, j)| cols[j][i]);
        FeatureMatrix {
            row_keys: (0..n)
                .map(|i| RowKey {
                    quarter_end: NaiveDate::from_ymd_opt(2020, 3, 31).unwrap(),
                    permno: i as u32 + 1,
                })
                .collect(),
            columns: (0..p)
                .map(|j| ColumnMeta::new(format!("c{j}"), ColumnKind::Numeric, "test", 0))
                .collect(),
            values,
        }
    }

    #[test]
    fn duplicate_column_dropped() {
        let a = [1.0, 2.0, 3.0, 5.0];
        let m = matrix(&[&a, &[4.0, 1.0, 3.0, 2.0], &a]);
        let (out, dropped) = prune_collinear(&m, 0.7, &[true; 4]).unwrap();
        assert_eq!(out.column_names(), vec!["c0", "c1"]);
        assert_eq!(dropped.len(), 1);
        match &dropped[0].reason {
            DropReason::Correlated { with, r } => {
                assert_eq!(with, "c0");
                assert!((r - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn threshold_is_strict() {
        // y = 0.69 x + sqrt(1 - 0.69^2) z with x, z orthogonal, mean zero and
        // equal norm, so r(x, y) is 0.69 up to rounding
        let x = [1.0, -1.0, 1.0, -1.0];
        let z = [1.0, 1.0, -1.0, -1.0];
        let s = (1.0f64 - 0.69 * 0.69).sqrt();
        let y: Vec<f64> = x.iter().zip(z).map(|(a, b)| 0.69 * a + s * b).collect();
        let m = matrix(&[&x, &y]);
        let r = pearson(m.values.column(0), m.values.column(1), &[0, 1, 2, 3]).unwrap();
        assert!((r - 0.69).abs() < 1e-12);
        let (out, dropped) = prune_collinear(&m, 0.7, &[true; 4]).unwrap();
        assert_eq!(out.n_cols(), 2);
        assert!(dropped.is_empty());
    }

    #[test]
    fn three_correlated_columns_keep_first() {
        // Hand-computed on the 5 rows: r(a,b) = 0.99486, r(a,c) = 0.98901,
        // r(b,c) = 0.96998, all above 0.9.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [1.1, 1.9, 3.2, 3.9, 5.3];
        let c = [0.8, 2.3, 2.9, 4.2, 4.8];
        let m = matrix(&[&a, &b, &c]);
        let rows = [0, 1, 2, 3, 4];
        for (i, j, expect) in [(0, 1, 0.99486), (0, 2, 0.98901), (1, 2, 0.96998)] {
            let r = pearson(m.values.column(i), m.values.column(j), &rows).unwrap();
            assert!((r - expect).abs() < 1e-5, "r({i},{j}) = {r}");
        }
        let (out, dropped) = prune_collinear(&m, 0.7, &[true; 5]).unwrap();
        assert_eq!(out.column_names(), vec!["c0"]);
        assert_eq!(dropped.len(), 2);
    }

    #[test]
    fn zero_variance_dropped() {
        let m = matrix(&[&[1.0, 2.0, 3.0], &[7.0, 7.0, 7.0]]);
        let (out, dropped) = prune_collinear(&m, 0.7, &[true; 3]).unwrap();
        assert_eq!(out.column_names(), vec!["c0"]);
        assert_eq!(dropped[0].reason, DropReason::ZeroVariance);
    }

    #[test]
    fn only_training_rows_count() {
        // identical on the first three rows; r = 0.172 over all five
        let a = [1.0, 2.0, 3.0, 10.0, -10.0];
        let b = [1.0, 2.0, 3.0, -3.0, -3.0];
        let m = matrix(&[&a, &b]);
        let train = [true, true, true, false, false];
        let (out, _) = prune_collinear(&m, 0.7, &train).unwrap();
        assert_eq!(out.n_cols(), 1);
        let (out, _) = prune_collinear(&m, 0.7, &[true; 5]).unwrap();
        assert_eq!(out.n_cols(), 2);
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = matrix(&[&[1.0, 2.0]]);
        assert!(matches!(prune_collinear(&m, 1.0, &[true; 2]), Err(FeatureError::Threshold(_))));
        assert!(matches!(prune_collinear(&m, 0.7, &[true]), Err(FeatureError::MaskLength { .. })));
        assert!(matches!(prune_collinear(&m, 0.7, &[false; 2]), Err(FeatureError::NoTrainingRows)));
    }
}
