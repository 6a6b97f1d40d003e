use std::collections::BTreeMap;

use serde::Serialize;

use super::RowKey;
use crate::panel_store::{Field, Metric, Panel};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ColumnImputation {
    pub imputed: usize,
    pub unresolved: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImputationReport {
    pub per_column: BTreeMap<String, ColumnImputation>,
    /// Rows left with at least one unresolved missing metric.
    pub flagged_rows: Vec<RowKey>,
}

impl ImputationReport {
    pub fn total_imputed(&self) -> usize {
        self.per_column.values().map(|c| c.imputed).sum()
    }
}

/// Fills each missing metric with the mean of the firm's values one and two
/// panel quarters earlier, or with whichever of the two exists. Earlier
/// imputations feed later ones, so a run of gaps is carried forward. A value
/// with no prior observation stays missing and its row is flagged.
pub fn impute_rolling_mean(panel: &Panel) -> (Panel, ImputationReport) {
    let mut report = ImputationReport::default();
    for f in Field::ALL {
        report.per_column.insert(f.name().to_string(), ColumnImputation::default());
    }
    let mut records = panel.records().to_vec();
    for i in 0..records.len() {
        let prev1 = panel.lagged(i, 1);
        let prev2 = panel.lagged(i, 2);
        let mut flagged = false;
        for f in Field::ALL {
            if !records[i].get(f).is_missing() {
                continue;
            }
            // earlier quarters sort first, so their imputations are already in place
            let a = prev1.and_then(|j| records[j].get(f).value());
            let b = prev2.and_then(|j| records[j].get(f).value());
            let filled = match (a, b) {
                (Some(a), Some(b)) => Some((a + b) / 2.0),
                (Some(v), None) | (None, Some(v)) => Some(v),
                (None, None) => None,
            };
            let entry = report.per_column.get_mut(f.name()).expect("all fields present");
            match filled {
                Some(v) => {
                    records[i].set(f, Metric::Imputed(v));
                    entry.imputed += 1;
                }
                None => {
                    entry.unresolved += 1;
                    flagged = true;
                }
            }
        }
        if flagged {
            report.flagged_rows.push(RowKey {
                quarter_end: records[i].quarter_end,
                permno: records[i].id.permno,
            });
        }
    }
    let mut it = records.into_iter();
    let imputed = panel.map_records(|_, r| *r = it.next().expect("same length"));
    (imputed, report)
}
