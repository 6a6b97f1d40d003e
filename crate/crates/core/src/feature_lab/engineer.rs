use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};
use ndarray::Array2;
use serde::Serialize;

use super::{ColumnKind, ColumnMeta, FeatureError, FeatureMatrix, ImputationReport, RowKey};
use crate::calendar;
use crate::panel_store::{Field, Panel, SecurityId};

/// Fields carried into the model as one-quarter lags. Market cap is left
/// out on purpose; it never becomes a feature.
pub const LAG_FIELDS: [Field; 18] = [
    Field::Price,
    Field::Volume,
    Field::TotalAssets,
    Field::TotalLiabilities,
    Field::NetIncome,
    Field::OperatingIncome,
    Field::CashFlowOps,
    Field::CurrentRatio,
    Field::DebtToEquity,
    Field::Roa,
    Field::Roe,
    Field::Eps,
    Field::BookValuePerShare,
    Field::NumAnalysts,
    Field::AuditorChanges,
    Field::Restatements,
    Field::Ret1m,
    Field::AvgVol3m,
];

pub const GROWTH_COLUMN: &str = "price_growth_qoq";
pub const LQP_COLUMN: &str = "last_quarter_positive";

/// `<field>_lag1` for each requested field, aligned with `panel.records()`.
/// `None` where the firm has no record (or no value) one quarter earlier.
pub fn add_lag_features(
    panel: &Panel,
    fields: &[&str],
) -> Result<Vec<(String, Vec<Option<f64>>)>, FeatureError> {
    let resolved: Vec<Field> = fields
        .iter()
        .map(|name| Field::from_name(name).ok_or_else(|| FeatureError::UnknownField(name.to_string())))
        .collect::<Result<_, _>>()?;
    Ok(resolved
        .into_iter()
        .map(|f| (format!("{}_lag1", f.name()), lagged_values(panel, f, 1)))
        .collect())
}

fn lagged_values(panel: &Panel, field: Field, lag: usize) -> Vec<Option<f64>> {
    (0..panel.len())
        .map(|i| {
            panel
                .lagged(i, lag)
                .and_then(|j| panel.records()[j].get(field).value())
        })
        .collect()
}

/// Price growth over the two quarters before `t`: price(t-1)/price(t-2) - 1.
pub fn add_growth_factor(panel: &Panel) -> Vec<Option<f64>> {
    let p1 = lagged_values(panel, Field::Price, 1);
    let p2 = lagged_values(panel, Field::Price, 2);
    p1.into_iter()
        .zip(p2)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b - 1.0),
            _ => None,
        })
        .collect()
}

/// 1 when last quarter's EPS was strictly positive, 0 otherwise; `None`
/// without a prior EPS.
pub fn add_last_quarter_positive(panel: &Panel) -> Vec<Option<f64>> {
    lagged_values(panel, Field::Eps, 1)
        .into_iter()
        .map(|eps| eps.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateParts {
    pub year: i32,
    pub month: u32,
    /// Monday = 0.
    pub day_of_week: u32,
}

impl From<NaiveDate> for DateParts {
    fn from(d: NaiveDate) -> Self {
        DateParts {
            year: d.year(),
            month: d.month(),
            day_of_week: calendar::day_of_week(d),
        }
    }
}

pub fn add_datetime_features(panel: &Panel) -> Vec<DateParts> {
    panel.records().iter().map(|r| DateParts::from(r.quarter_end)).collect()
}

/// SIC division name from the two-digit major group.
pub fn sic_division(code: u16) -> &'static str {
    match code / 100 {
        1..=9 => "Agriculture, Forestry & Fishing",
        10..=14 => "Mining",
        15..=17 => "Construction",
        20..=39 => "Manufacturing",
        40..=49 => "Transportation & Public Utilities",
        50..=51 => "Wholesale Trade",
        52..=59 => "Retail Trade",
        60..=67 => "Finance, Insurance & Real Estate",
        70..=89 => "Services",
        91..=99 => "Public Administration",
        _ => "Nonclassifiable",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExcludedRow {
    pub key: RowKey,
    pub reason: String,
}

/// Engineered but not yet pruned or scaled features. Rows align across
/// `matrix`, `labels`, `ids`, `industry` and `quarter_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineeredPanel {
    pub matrix: FeatureMatrix,
    pub labels: Vec<u8>,
    pub ids: Vec<SecurityId>,
    /// Industry division as of the previous quarter.
    pub industry: Vec<Option<String>>,
    /// Position of each row's quarter in the source panel's quarter list.
    pub quarter_index: Vec<usize>,
    pub quarters: Vec<NaiveDate>,
    pub excluded: Vec<ExcludedRow>,
}

impl EngineeredPanel {
    pub fn mask_for_quarters(&self, quarters: &BTreeSet<NaiveDate>) -> Vec<bool> {
        self.matrix
            .row_keys
            .iter()
            .map(|k| quarters.contains(&k.quarter_end))
            .collect()
    }
}

/// Assembles the raw feature matrix from an imputed panel. Rows without a
/// complete history (no prior quarter, missing lag input, or a prior-quarter
/// record the imputation could not fill) are excluded and listed. Nothing
/// from the row's own quarter other than its date enters the features.
pub fn engineer(panel: &Panel, imputation: &ImputationReport) -> EngineeredPanel {
    let flagged: BTreeSet<RowKey> = imputation.flagged_rows.iter().copied().collect();
    let names: Vec<&str> = LAG_FIELDS.iter().map(|f| f.name()).collect();
    let lags = add_lag_features(panel, &names).expect("lag fields are valid");
    let growth = add_growth_factor(panel);
    let lqp = add_last_quarter_positive(panel);
    let dates = add_datetime_features(panel);

    let mut columns: Vec<ColumnMeta> = LAG_FIELDS
        .iter()
        .zip(&lags)
        .map(|(f, (name, _))| ColumnMeta::new(name.clone(), ColumnKind::Lag, f.name(), 1))
        .collect();
    columns.push(ColumnMeta::new(GROWTH_COLUMN, ColumnKind::Growth, "price", 1));
    columns.push(ColumnMeta::new(LQP_COLUMN, ColumnKind::BinaryFlag, "eps", 1));
    for part in ["year", "month", "day_of_week"] {
        columns.push(ColumnMeta::new(part, ColumnKind::DatetimePart, "quarter_end", 0));
    }
    let width = columns.len();

    let mut values = Vec::with_capacity(panel.len() * width);
    let mut row_keys = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut industry = Vec::new();
    let mut quarter_index = Vec::new();
    let mut excluded = Vec::new();
    let mut row = Vec::with_capacity(width);

    for (i, r) in panel.records().iter().enumerate() {
        let key = RowKey {
            quarter_end: r.quarter_end,
            permno: r.id.permno,
        };
        let prev = panel.lagged(i, 1);
        let prev_flagged = prev.is_some_and(|j| {
            let p = &panel.records()[j];
            flagged.contains(&RowKey { quarter_end: p.quarter_end, permno: p.id.permno })
        });
        let reason = if prev.is_none() {
            Some("no preceding quarter".to_string())
        } else if prev_flagged {
            Some("unresolved missing metric in prior quarter".to_string())
        } else if let Some((name, _)) = lags.iter().find(|(_, v)| v[i].is_none()) {
            Some(format!("missing {name}"))
        } else if growth[i].is_none() {
            Some(format!("missing {GROWTH_COLUMN}"))
        } else {
            None
        };
        if let Some(reason) = reason {
            excluded.push(ExcludedRow { key, reason });
            continue;
        }
        row.clear();
        row.extend(lags.iter().map(|(_, v)| v[i].expect("checked")));
        row.push(growth[i].expect("checked"));
        row.push(lqp[i].expect("eps lag checked"));
        let d = dates[i];
        row.extend([f64::from(d.year), f64::from(d.month), f64::from(d.day_of_week)]);
        values.extend_from_slice(&row);

        row_keys.push(key);
        labels.push(r.label());
        ids.push(r.id.clone());
        let prev_sic = prev.and_then(|j| panel.records()[j].sic_code);
        industry.push(prev_sic.map(|c| sic_division(c).to_string()));
        quarter_index.push(panel.quarter_index(i));
    }

    let n = row_keys.len();
    EngineeredPanel {
        matrix: FeatureMatrix {
            row_keys,
            columns,
            values: Array2::from_shape_vec((n, width), values).expect("row width is fixed"),
        },
        labels,
        ids,
        industry,
        quarter_index,
        quarters: panel.quarters().to_vec(),
        excluded,
    }
}
