//! Firm-quarter panel: record types, validation, market-cap screening and
//! membership transitions.

mod io;
mod synth;

pub use io::{load_panel, read_panel, write_panel, LoadedPanel, PANEL_HEADER};
pub use synth::{generate_synthetic, SynthConfig};

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {detail}")]
    Header { path: String, detail: String },
    #[error("{} invalid row(s); first: {}", .0.len(), .0.first().map(|r| r.to_string()).unwrap_or_default())]
    Validation(Vec<RowError>),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A rejected input row. `line` is the 1-based line in the source file
/// (the header is line 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub column: Option<String>,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.column {
            Some(c) => write!(f, "line {} column {}: {}", self.line, c, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SecurityId {
    pub permno: u32,
    pub gvkey: u32,
    pub ticker: String,
}

impl SecurityId {
    pub fn new(permno: u32, gvkey: u32, ticker: impl Into<String>) -> Result<Self, String> {
        let ticker = ticker.into();
        if permno == 0 {
            return Err("permno must be positive".into());
        }
        if ticker.is_empty() || ticker.len() > 6 {
            return Err(format!("ticker {ticker:?} must have 1 to 6 characters"));
        }
        if !ticker
            .chars()
            .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
        {
            return Err(format!("ticker {ticker:?} must be uppercase alphanumeric"));
        }
        Ok(Self {
            permno,
            gvkey,
            ticker,
        })
    }
}

/// Raw per-quarter metrics, in CSV column order (`sic_code` is held
/// separately as a categorical code).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Price,
    MarketCap,
    Volume,
    TotalAssets,
    TotalLiabilities,
    NetIncome,
    OperatingIncome,
    CashFlowOps,
    CurrentRatio,
    DebtToEquity,
    Roa,
    Roe,
    Eps,
    BookValuePerShare,
    NumAnalysts,
    AuditorChanges,
    Restatements,
    Ret1m,
    AvgVol3m,
}

pub const N_FIELDS: usize = 19;

impl Field {
    pub const ALL: [Field; N_FIELDS] = [
        Field::Price,
        Field::MarketCap,
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

    pub fn name(self) -> &'static str {
        match self {
            Field::Price => "price",
            Field::MarketCap => "market_cap",
            Field::Volume => "volume",
            Field::TotalAssets => "total_assets",
            Field::TotalLiabilities => "total_liabilities",
            Field::NetIncome => "net_income",
            Field::OperatingIncome => "operating_income",
            Field::CashFlowOps => "cash_flow_ops",
            Field::CurrentRatio => "current_ratio",
            Field::DebtToEquity => "debt_to_equity",
            Field::Roa => "roa",
            Field::Roe => "roe",
            Field::Eps => "eps",
            Field::BookValuePerShare => "book_value_per_share",
            Field::NumAnalysts => "num_analysts",
            Field::AuditorChanges => "auditor_changes",
            Field::Restatements => "restatements",
            Field::Ret1m => "ret_1m",
            Field::AvgVol3m => "avg_vol_3m",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Field::ALL.iter().copied().find(|f| f.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Compustat-style statement items, plus volume; these are the values the
    /// synthetic generator masks as missing.
    pub fn is_fundamental(self) -> bool {
        matches!(
            self,
            Field::Volume
                | Field::TotalAssets
                | Field::TotalLiabilities
                | Field::NetIncome
                | Field::OperatingIncome
                | Field::CashFlowOps
                | Field::CurrentRatio
                | Field::DebtToEquity
                | Field::Roa
                | Field::Roe
                | Field::Eps
                | Field::BookValuePerShare
        )
    }

    fn must_be_non_negative(self) -> bool {
        matches!(
            self,
            Field::Volume
                | Field::NumAnalysts
                | Field::AuditorChanges
                | Field::Restatements
                | Field::AvgVol3m
        )
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A metric slot. Imputed values keep their provenance so downstream audits
/// can tell them from reported ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    Present(f64),
    Missing,
    Imputed(f64),
}

impl Metric {
    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Present(v) | Metric::Imputed(v) => Some(v),
            Metric::Missing => None,
        }
    }

    pub fn is_missing(self) -> bool {
        matches!(self, Metric::Missing)
    }
}

impl From<Option<f64>> for Metric {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Metric::Missing, Metric::Present)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmQuarter {
    pub id: SecurityId,
    pub quarter_end: NaiveDate,
    pub metrics: [Metric; N_FIELDS],
    pub sic_code: Option<u16>,
    pub in_sp500: bool,
}

impl FirmQuarter {
    pub fn get(&self, field: Field) -> Metric {
        self.metrics[field.index()]
    }

    pub fn set(&mut self, field: Field, value: Metric) {
        self.metrics[field.index()] = value;
    }

    pub fn label(&self) -> u8 {
        u8::from(self.in_sp500)
    }

    /// Checks record-level invariants, returning the offending column name
    /// and message on failure.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if !calendar::is_quarter_end_trading_date(self.quarter_end) {
            return Err((
                "quarter_end".into(),
                format!("{} is not a quarter-end trading date", self.quarter_end),
            ));
        }
        for field in Field::ALL {
            if let Some(v) = self.get(field).value() {
                if !v.is_finite() {
                    return Err((field.name().into(), "non-finite value".into()));
                }
                if field == Field::Price && v <= 0.0 {
                    return Err((field.name().into(), format!("price must be positive, got {v}")));
                }
                if field.must_be_non_negative() && v < 0.0 {
                    return Err((field.name().into(), format!("must be non-negative, got {v}")));
                }
            }
        }
        if let Some(sic) = self.sic_code {
            if sic > 9999 {
                return Err(("sic_code".into(), format!("{sic} is not a 4-digit code")));
            }
        }
        Ok(())
    }
}

/// Immutable, validated panel sorted by (quarter_end, permno).
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    records: Vec<FirmQuarter>,
    quarters: Vec<NaiveDate>,
    quarter_of: Vec<usize>,
    by_key: HashMap<(u32, usize), usize>,
}

impl Panel {
    /// Builds a panel, collapsing duplicate (permno, quarter_end) keys to the
    /// first occurrence in input order. Returns the dropped keys.
    pub fn from_records(mut records: Vec<FirmQuarter>) -> (Panel, Vec<(u32, NaiveDate)>) {
        // stable: among duplicates the first input occurrence sorts first
        records.sort_by_key(|r| (r.quarter_end, r.id.permno));
        let mut dropped = Vec::new();
        let mut kept: Vec<FirmQuarter> = Vec::with_capacity(records.len());
        for r in records {
            if let Some(last) = kept.last() {
                if last.quarter_end == r.quarter_end && last.id.permno == r.id.permno {
                    dropped.push((r.id.permno, r.quarter_end));
                    continue;
                }
            }
            kept.push(r);
        }
        (Self::from_sorted_unique(kept), dropped)
    }

    fn from_sorted_unique(records: Vec<FirmQuarter>) -> Panel {
        let mut quarters: Vec<NaiveDate> = Vec::new();
        let mut quarter_of = Vec::with_capacity(records.len());
        let mut by_key = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if quarters.last() != Some(&r.quarter_end) {
                quarters.push(r.quarter_end);
            }
            let q = quarters.len() - 1;
            quarter_of.push(q);
            by_key.insert((r.id.permno, q), i);
        }
        Panel {
            records,
            quarters,
            quarter_of,
            by_key,
        }
    }

    pub fn empty() -> Panel {
        Self::from_sorted_unique(Vec::new())
    }

    pub fn records(&self) -> &[FirmQuarter] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FirmQuarter> {
        self.records
    }

    pub fn quarters(&self) -> &[NaiveDate] {
        &self.quarters
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Position of the record's quarter in [`Panel::quarters`].
    pub fn quarter_index(&self, record: usize) -> usize {
        self.quarter_of[record]
    }

    pub fn find(&self, permno: u32, quarter_index: usize) -> Option<usize> {
        self.by_key.get(&(permno, quarter_index)).copied()
    }

    /// The same firm's record `lag` panel quarters earlier, if present.
    pub fn lagged(&self, record: usize, lag: usize) -> Option<usize> {
        let q = self.quarter_of[record].checked_sub(lag)?;
        self.find(self.records[record].id.permno, q)
    }

    /// Index range of the records dated `quarters()[q]`.
    pub fn quarter_range(&self, q: usize) -> std::ops::Range<usize> {
        let start = self.quarter_of.partition_point(|&x| x < q);
        let end = self.quarter_of.partition_point(|&x| x <= q);
        start..end
    }

    /// Applies `f` to every record; keys must be left untouched.
    pub fn map_records(&self, mut f: impl FnMut(usize, &mut FirmQuarter)) -> Panel {
        let mut records = self.records.clone();
        for (i, r) in records.iter_mut().enumerate() {
            f(i, r);
        }
        debug_assert!(records
            .iter()
            .zip(&self.records)
            .all(|(a, b)| a.id.permno == b.id.permno && a.quarter_end == b.quarter_end));
        Panel {
            records,
            quarters: self.quarters.clone(),
            quarter_of: self.quarter_of.clone(),
            by_key: self.by_key.clone(),
        }
    }

    /// Actual membership transitions between every pair of consecutive
    /// quarters, ordered by quarter then permno.
    pub fn transitions(&self) -> Vec<TransitionEvent> {
        let mut out = Vec::new();
        for q in 1..self.quarters.len() {
            let prev: BTreeMap<u32, bool> = self.records[self.quarter_range(q - 1)]
                .iter()
                .map(|r| (r.id.permno, r.in_sp500))
                .collect();
            let current: Vec<(SecurityId, bool)> = self.records[self.quarter_range(q)]
                .iter()
                .map(|r| (r.id.clone(), r.in_sp500))
                .collect();
            out.extend(derive_transitions(&prev, &current, self.quarters[q]));
        }
        out
    }
}

/// Keeps the `k` largest firms by market cap in every quarter. Ties at the
/// boundary go to the lower permno; a missing market cap ranks last.
pub fn top_k_by_market_cap(panel: &Panel, k: usize) -> Panel {
    assert!(k >= 1, "k must be at least 1");
    let mut kept = Vec::with_capacity(panel.len());
    for q in 0..panel.quarters().len() {
        let slice = &panel.records()[panel.quarter_range(q)];
        if slice.len() <= k {
            kept.extend(slice.iter().cloned());
            continue;
        }
        let mut order: Vec<&FirmQuarter> = slice.iter().collect();
        order.sort_by(|a, b| {
            let ma = a.get(Field::MarketCap).value().unwrap_or(f64::NEG_INFINITY);
            let mb = b.get(Field::MarketCap).value().unwrap_or(f64::NEG_INFINITY);
            mb.total_cmp(&ma).then(a.id.permno.cmp(&b.id.permno))
        });
        let mut chosen: Vec<FirmQuarter> = order[..k].iter().map(|r| (*r).clone()).collect();
        chosen.sort_by_key(|r| r.id.permno);
        kept.extend(chosen);
    }
    Panel::from_sorted_unique(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransitionKind {
    Addition,
    Removal,
}

impl TransitionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransitionKind::Addition => "addition",
            TransitionKind::Removal => "removal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "addition" | "add" | "added" => Some(TransitionKind::Addition),
            "removal" | "remove" | "removed" | "deletion" | "delete" => {
                Some(TransitionKind::Removal)
            }
            _ => None,
        }
    }
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub id: SecurityId,
    pub quarter_end: NaiveDate,
    pub kind: TransitionKind,
}

/// Membership changes from `prev` to `current`. Firms missing from `prev`
/// count as non-members. Output follows the order of `current`.
pub fn derive_transitions(
    prev: &BTreeMap<u32, bool>,
    current: &[(SecurityId, bool)],
    quarter_end: NaiveDate,
) -> Vec<TransitionEvent> {
    current
        .iter()
        .filter_map(|(id, now)| {
            let before = prev.get(&id.permno).copied().unwrap_or(false);
            let kind = match (before, *now) {
                (false, true) => TransitionKind::Addition,
                (true, false) => TransitionKind::Removal,
                _ => return None,
            };
            Some(TransitionEvent {
                id: id.clone(),
                quarter_end,
                kind,
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub fn record(permno: u32, date: NaiveDate, market_cap: f64, member: bool) -> FirmQuarter {
        let mut metrics = [Metric::Missing; N_FIELDS];
        metrics[Field::Price.index()] = Metric::Present(10.0);
        metrics[Field::MarketCap.index()] = Metric::Present(market_cap);
        FirmQuarter {
            id: SecurityId::new(permno, permno, format!("T{permno}")).unwrap(),
            quarter_end: date,
            metrics,
            sic_code: Some(3571),
            in_sp500: member,
        }
    }

    fn q(i: usize) -> NaiveDate {
        calendar::quarter_ends(2020, 1, 8)[i]
    }

    #[test]
    fn security_id_rules() {
        assert!(SecurityId::new(0, 1, "A").is_err());
        assert!(SecurityId::new(1, 1, "").is_err());
        assert!(SecurityId::new(1, 1, "abc").is_err());
        assert!(SecurityId::new(1, 1, "TOOLONG").is_err());
        assert!(SecurityId::new(1, 1, "BRK2").is_ok());
    }

    #[test]
    fn duplicates_keep_first() {
        let a = record(5, q(0), 1.0, false);
        let b = record(5, q(0), 2.0, true);
        let c = record(3, q(0), 3.0, false);
        let (p, dropped) = Panel::from_records(vec![a.clone(), b, c]);
        assert_eq!(p.len(), 2);
        assert_eq!(dropped, vec![(5, q(0))]);
        assert_eq!(p.records()[1], a);
        assert_eq!(p.records()[0].id.permno, 3);
    }

    #[test]
    fn lag_lookup_uses_panel_quarters() {
        let recs = vec![
            record(1, q(0), 1.0, false),
            record(1, q(1), 1.0, false),
            record(2, q(1), 1.0, false),
            record(1, q(2), 1.0, false),
            record(2, q(2), 1.0, false),
        ];
        let (p, _) = Panel::from_records(recs);
        assert_eq!(p.quarters().len(), 3);
        let last_2 = p.find(2, 2).unwrap();
        assert_eq!(p.lagged(last_2, 1), p.find(2, 1));
        assert_eq!(p.lagged(last_2, 2), None);
        assert_eq!(p.quarter_range(1), 1..3);
    }

    #[test]
    fn top_k_boundary_tie_prefers_lower_permno() {
        let recs = vec![
            record(9, q(0), 50.0, false),
            record(4, q(0), 50.0, false),
            record(1, q(0), 100.0, false),
        ];
        let (p, _) = Panel::from_records(recs);
        let top = top_k_by_market_cap(&p, 2);
        let kept: Vec<u32> = top.records().iter().map(|r| r.id.permno).collect();
        assert_eq!(kept, vec![1, 4]);
    }

    #[test]
    fn top_k_drops_the_tail() {
        let recs: Vec<_> = (1..=900).map(|i| record(i, q(0), i as f64, false)).collect();
        let (p, _) = Panel::from_records(recs);
        let top = top_k_by_market_cap(&p, 800);
        assert_eq!(top.len(), 800);
        // the 100 smallest (ranks 801..900) are gone
        assert!(top.records().iter().all(|r| r.id.permno > 100));
    }

    #[test]
    fn top_k_passes_small_quarters() {
        let recs: Vec<_> = (1..=500).map(|i| record(i, q(0), i as f64, false)).collect();
        let (p, _) = Panel::from_records(recs);
        assert_eq!(top_k_by_market_cap(&p, 800), p);
    }

    #[test]
    fn transitions_basic() {
        let id = SecurityId::new(1, 1, "A").unwrap();
        let prev: BTreeMap<u32, bool> = [(1, true)].into();
        let out = derive_transitions(&prev, &[(id.clone(), false)], q(1));
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, TransitionKind::Removal);

        let prev: BTreeMap<u32, bool> = [(1, false)].into();
        let out = derive_transitions(&prev, &[(id.clone(), true)], q(1));
        assert_eq!(out[0].kind, TransitionKind::Addition);

        let prev: BTreeMap<u32, bool> = [(1, true)].into();
        assert!(derive_transitions(&prev, &[(id.clone(), true)], q(1)).is_empty());

        // absent last quarter counts as a non-member
        let out = derive_transitions(&BTreeMap::new(), &[(id, true)], q(1));
        assert_eq!(out[0].kind, TransitionKind::Addition);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut r = record(1, q(0), 1.0, true);
        assert!(r.validate().is_ok());
        r.set(Field::Price, Metric::Present(-1.0));
        assert_eq!(r.validate().unwrap_err().0, "price");
        let mut r = record(1, q(0), 1.0, true);
        r.set(Field::Volume, Metric::Present(f64::NAN));
        assert!(r.validate().is_err());
        let mut r = record(1, q(0), 1.0, true);
        r.quarter_end = NaiveDate::from_ymd_opt(2020, 5, 29).unwrap();
        assert_eq!(r.validate().unwrap_err().0, "quarter_end");
    }

    proptest! {
        #[test]
        fn transition_conservation(
            prev in proptest::collection::btree_map(1u32..60, any::<bool>(), 0..40),
            cur in proptest::collection::btree_map(1u32..60, any::<bool>(), 1..40),
        ) {
            let current: Vec<(SecurityId, bool)> = cur
                .iter()
                .map(|(p, m)| (SecurityId::new(*p, *p, "X").unwrap(), *m))
                .collect();
            let out = derive_transitions(&prev, &current, q(1));
            let adds = out.iter().filter(|e| e.kind == TransitionKind::Addition).count() as i64;
            let rems = out.iter().filter(|e| e.kind == TransitionKind::Removal).count() as i64;
            let mut common_change = 0i64;
            let mut new_members = 0i64;
            for (p, now) in &cur {
                match prev.get(p) {
                    Some(before) => common_change += i64::from(*now) - i64::from(*before),
                    None => new_members += i64::from(*now),
                }
            }
            prop_assert_eq!(adds - rems, common_change + new_members);
        }

        #[test]
        fn top_k_idempotent(caps in proptest::collection::vec((1u32..400, 0u32..50), 1..120), k in 1usize..60) {
            let recs: Vec<_> = caps
                .iter()
                .enumerate()
                .map(|(i, (permno, cap))| record(*permno, q(i % 3), f64::from(*cap), false))
                .collect();
            let (p, _) = Panel::from_records(recs);
            let once = top_k_by_market_cap(&p, k);
            let twice = top_k_by_market_cap(&once, k);
            prop_assert_eq!(once, twice);
        }
    }
}
