//! Announcement event study (close-to-close moves over trading-day
//! horizons) and the long-additions / short-removals backtest.

mod io;
mod synth;

pub use io::{load_announcements, load_prices, read_announcements, read_prices, write_announcements, write_moves_csv, write_prices};
pub use synth::{generate_events, EventSynthConfig, SyntheticEvents};

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel_store::{TransitionEvent, TransitionKind};

/// Horizons, in trading days, reported by [`aggregate_stats`].
pub const HORIZONS: [usize; 3] = [1, 2, 7];

#[derive(Debug, Error)]
pub enum EventError {
    #[error("{ticker}: prices must be strictly increasing in date (at {date})")]
    Unordered { ticker: String, date: NaiveDate },
    #[error("{ticker}: close on {date} must be positive and finite")]
    BadClose { ticker: String, date: NaiveDate },
    #[error("{ticker}: no close on announcement date {date}")]
    MissingAnnouncement { ticker: String, date: NaiveDate },
    #[error("{ticker}: series ends {available} trading days after {date}, need {horizon}")]
    ShortSeries { ticker: String, date: NaiveDate, horizon: usize, available: usize },
    #[error("{path}:{line}: {message}")]
    Row { path: String, line: u64, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid setting: {0}")]
    Config(String),
}

/// Daily closes on trading days, strictly increasing in date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    points: Vec<(NaiveDate, f64)>,
}

impl PriceSeries {
    pub fn new(ticker: &str, points: Vec<(NaiveDate, f64)>) -> Result<PriceSeries, EventError> {
        for (i, &(date, close)) in points.iter().enumerate() {
            if !(close.is_finite() && close > 0.0) {
                return Err(EventError::BadClose { ticker: ticker.into(), date });
            }
            if i > 0 && points[i - 1].0 >= date {
                return Err(EventError::Unordered { ticker: ticker.into(), date });
            }
        }
        Ok(PriceSeries { points })
    }

    pub fn points(&self) -> &[(NaiveDate, f64)] {
        &self.points
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.points.binary_search_by_key(&date, |p| p.0).ok()
    }

    /// Percent close-to-close move from `date` to `horizon` trading days
    /// (entries of the series) later.
    pub fn move_pct(&self, ticker: &str, date: NaiveDate, horizon: usize) -> Result<f64, EventError> {
        let i = self
            .position(date)
            .ok_or_else(|| EventError::MissingAnnouncement { ticker: ticker.into(), date })?;
        let available = self.points.len() - 1 - i;
        if horizon > available {
            return Err(EventError::ShortSeries { ticker: ticker.into(), date, horizon, available });
        }
        let (start, end) = (self.points[i].1, self.points[i + horizon].1);
        Ok(100.0 * (end - start) / start)
    }
}

/// One announced index change.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Announcement {
    pub ticker: String,
    pub kind: TransitionKind,
    pub announce_date: NaiveDate,
}

/// An announcement joined to its price window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ticker: String,
    pub kind: TransitionKind,
    pub announce_date: NaiveDate,
    pub prices: PriceSeries,
}

impl EventRecord {
    /// Requires the announcement close and at least the longest reported
    /// horizon of closes after it.
    pub fn new(ticker: &str, kind: TransitionKind, announce_date: NaiveDate, prices: PriceSeries) -> Result<EventRecord, EventError> {
        let longest = *HORIZONS.iter().max().expect("nonempty");
        prices.move_pct(ticker, announce_date, longest)?;
        Ok(EventRecord { ticker: ticker.into(), kind, announce_date, prices })
    }
}

/// Joins announcements to price series; failures are returned alongside
/// rather than aborting the batch.
pub fn join_events(
    announcements: &[Announcement],
    prices: &BTreeMap<String, PriceSeries>,
) -> (Vec<EventRecord>, Vec<(Announcement, String)>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for a in announcements {
        let Some(series) = prices.get(&a.ticker) else {
            failed.push((a.clone(), format!("{}: no price series", a.ticker)));
            continue;
        };
        match EventRecord::new(&a.ticker, a.kind, a.announce_date, series.clone()) {
            Ok(ev) => ok.push(ev),
            Err(e) => failed.push((a.clone(), e.to_string())),
        }
    }
    (ok, failed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventStat {
    pub horizon: usize,
    pub move_pct: f64,
}

pub fn compute_move(ev: &EventRecord, horizon: usize) -> Result<EventStat, EventError> {
    Ok(EventStat {
        horizon,
        move_pct: ev.prices.move_pct(&ev.ticker, ev.announce_date, horizon)?,
    })
}

/// Drops events whose ticker is listed; returns the survivors and the
/// listed tickers that matched nothing (logged as warnings).
pub fn exclude_outliers(events: &[EventRecord], tickers: &[String]) -> (Vec<EventRecord>, Vec<String>) {
    let listed: BTreeSet<&str> = tickers.iter().map(String::as_str).collect();
    let present: BTreeSet<&str> = events.iter().map(|e| e.ticker.as_str()).collect();
    let absent: Vec<String> = listed.difference(&present).map(|t| t.to_string()).collect();
    for t in &absent {
        log::warn!("excluded ticker {t} has no events");
    }
    let kept = events.iter().filter(|e| !listed.contains(e.ticker.as_str())).cloned().collect();
    (kept, absent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatBlock {
    pub kind: TransitionKind,
    pub horizon: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTable {
    pub blocks: Vec<StatBlock>,
    pub excluded_tickers: Vec<String>,
    pub notices: Vec<String>,
}

impl StatTable {
    pub fn block(&self, kind: TransitionKind, horizon: usize) -> Option<&StatBlock> {
        self.blocks.iter().find(|b| b.kind == kind && b.horizon == horizon)
    }
}

/// Median with the midpoint rule for even counts; `values` must be nonempty.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean/min/max/median of moves per (kind, horizon) over [`HORIZONS`]. A
/// kind without events is omitted and noted. `excluded` is recorded only.
pub fn aggregate_stats(events: &[EventRecord], excluded: &[String]) -> Result<StatTable, EventError> {
    let mut blocks = Vec::new();
    let mut notices = Vec::new();
    for kind in [TransitionKind::Addition, TransitionKind::Removal] {
        let of_kind: Vec<&EventRecord> = events.iter().filter(|e| e.kind == kind).collect();
        if of_kind.is_empty() {
            notices.push(format!("no {kind} events; block omitted"));
            continue;
        }
        for h in HORIZONS {
            let moves = of_kind.iter().map(|e| compute_move(e, h).map(|s| s.move_pct)).collect::<Result<Vec<_>, _>>()?;
            blocks.push(StatBlock {
                kind,
                horizon: h,
                count: moves.len(),
                mean: moves.iter().sum::<f64>() / moves.len() as f64,
                min: moves.iter().copied().fold(f64::INFINITY, f64::min),
                max: moves.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                median: median(&moves),
            });
        }
    }
    Ok(StatTable {
        blocks,
        excluded_tickers: excluded.to_vec(),
        notices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Long,
    Short,
}

impl Side {
    pub fn for_kind(kind: TransitionKind) -> Side {
        match kind {
            TransitionKind::Addition => Side::Long,
            TransitionKind::Removal => Side::Short,
        }
    }
}

/// Something that implies a trade: an index change on a date.
pub trait Signal {
    fn ticker(&self) -> &str;
    fn kind(&self) -> TransitionKind;
    fn date(&self) -> NaiveDate;
}

impl Signal for TransitionEvent {
    fn ticker(&self) -> &str {
        &self.id.ticker
    }
    fn kind(&self) -> TransitionKind {
        self.kind
    }
    fn date(&self) -> NaiveDate {
        self.quarter_end
    }
}

impl Signal for Announcement {
    fn ticker(&self) -> &str {
        &self.ticker
    }
    fn kind(&self) -> TransitionKind {
        self.kind
    }
    fn date(&self) -> NaiveDate {
        self.announce_date
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeStub {
    pub ticker: String,
    pub side: Side,
    pub entry_date: NaiveDate,
}

/// Addition → long, removal → short, entered on the signal's date.
pub fn build_positions<S: Signal>(signals: &[S]) -> Vec<TradeStub> {
    signals
        .iter()
        .map(|s| TradeStub {
            ticker: s.ticker().to_string(),
            side: Side::for_kind(s.kind()),
            entry_date: s.date(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub ticker: String,
    pub side: Side,
    pub entry_date: NaiveDate,
    pub horizon: usize,
    pub trade_return_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTrade {
    pub ticker: String,
    pub entry_date: NaiveDate,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReport {
    pub horizon: usize,
    pub n_trades: usize,
    /// Equal-weighted mean trade return; `None` without trades.
    pub mean_return_pct: Option<f64>,
    /// Fraction of trades with a positive return.
    pub hit_rate: Option<f64>,
    pub skipped: Vec<SkippedTrade>,
}

pub fn backtest(
    stubs: &[TradeStub],
    prices: &BTreeMap<String, PriceSeries>,
    horizon: usize,
) -> (Vec<TradeRecord>, PortfolioReport) {
    let mut trades = Vec::new();
    let mut skipped = Vec::new();
    for s in stubs {
        let result = prices
            .get(&s.ticker)
            .ok_or_else(|| format!("{}: no price series", s.ticker))
            .and_then(|p| p.move_pct(&s.ticker, s.entry_date, horizon).map_err(|e| e.to_string()));
        match result {
            Ok(m) => trades.push(TradeRecord {
                ticker: s.ticker.clone(),
                side: s.side,
                entry_date: s.entry_date,
                horizon,
                trade_return_pct: match s.side {
                    Side::Long => m,
                    Side::Short => -m,
                },
            }),
            Err(reason) => skipped.push(SkippedTrade { ticker: s.ticker.clone(), entry_date: s.entry_date, reason }),
        }
    }
    let n = trades.len();
    let (mean, hit) = if n == 0 {
        (None, None)
    } else {
        (
            Some(trades.iter().map(|t| t.trade_return_pct).sum::<f64>() / n as f64),
            Some(trades.iter().filter(|t| t.trade_return_pct > 0.0).count() as f64 / n as f64),
        )
    };
    let report = PortfolioReport { horizon, n_trades: n, mean_return_pct: mean, hit_rate: hit, skipped };
    (trades, report)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::calendar::add_weekdays;

    pub(crate) fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    /// Weekday closes starting at `start`.
    pub(crate) fn series(start: NaiveDate, closes: &[f64]) -> PriceSeries {
        let pts = closes.iter().enumerate().map(|(i, &c)| (add_weekdays(start, i), c)).collect();
        PriceSeries::new("T", pts).unwrap()
    }

    fn event(ticker: &str, kind: TransitionKind, closes: &[f64]) -> EventRecord {
        let start = d("2024-03-04");
        EventRecord::new(ticker, kind, start, series(start, closes)).unwrap()
    }

    #[test]
    fn flat_and_simple_moves() {
        let flat = event("A", TransitionKind::Addition, &[100.0; 8]);
        for h in HORIZONS {
            assert_eq!(compute_move(&flat, h).unwrap().move_pct, 0.0);
        }
        let up = event("A", TransitionKind::Addition, &[100.0, 110.0, 100.0, 100.0, 100.0, 100.0, 100.0, 100.0]);
        assert_eq!(compute_move(&up, 1).unwrap().move_pct, 10.0);
        assert!(matches!(compute_move(&up, 8), Err(EventError::ShortSeries { available: 7, .. })));
    }

    #[test]
    fn friday_compares_with_monday() {
        let fri = d("2024-03-08");
        let s = PriceSeries::new("T", vec![(fri, 50.0), (d("2024-03-11"), 51.0), (d("2024-03-12"), 40.0)]).unwrap();
        assert_eq!(s.move_pct("T", fri, 1).unwrap(), 2.0);
        assert!(matches!(s.move_pct("T", d("2024-03-09"), 1), Err(EventError::MissingAnnouncement { .. })));
    }

    #[test]
    fn series_validation() {
        assert!(PriceSeries::new("T", vec![(d("2024-01-02"), 1.0), (d("2024-01-02"), 1.0)]).is_err());
        assert!(PriceSeries::new("T", vec![(d("2024-01-02"), 0.0)]).is_err());
        let short = series(d("2024-03-04"), &[1.0; 5]);
        assert!(EventRecord::new("T", TransitionKind::Addition, d("2024-03-04"), short).is_err());
    }

    #[test]
    fn exclusion_keeps_survivors() {
        let evs = vec![
            event("IR", TransitionKind::Addition, &[100.0, 150.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
            event("B", TransitionKind::Addition, &[100.0, 102.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
        ];
        let (kept, absent) = exclude_outliers(&evs, &["IR".into(), "ZZZ".into()]);
        assert_eq!(kept, evs[1..]);
        assert_eq!(absent, ["ZZZ"]);
        assert_eq!(exclude_outliers(&evs, &[]).0, evs);
    }

    #[test]
    fn two_point_stats() {
        let evs = vec![
            event("A", TransitionKind::Addition, &[100.0, 102.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
            event("B", TransitionKind::Addition, &[100.0, 104.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
        ];
        let t = aggregate_stats(&evs, &[]).unwrap();
        let b = t.block(TransitionKind::Addition, 1).unwrap();
        assert_eq!((b.mean, b.median, b.min, b.max, b.count), (3.0, 3.0, 2.0, 4.0, 2));
        assert!(t.block(TransitionKind::Removal, 1).is_none());
        assert_eq!(t.notices.len(), 1);
    }

    #[test]
    fn long_and_short_returns() {
        let start = d("2024-03-04");
        let prices: BTreeMap<String, PriceSeries> = [
            ("L".to_string(), series(start, &[100.0, 102.0])),
            ("S".to_string(), series(start, &[100.0, 97.0])),
        ]
        .into();
        let stubs = vec![
            TradeStub { ticker: "L".into(), side: Side::Long, entry_date: start },
            TradeStub { ticker: "S".into(), side: Side::Short, entry_date: start },
            TradeStub { ticker: "X".into(), side: Side::Long, entry_date: start },
        ];
        let (trades, report) = backtest(&stubs, &prices, 1);
        assert_eq!(trades[0].trade_return_pct, 2.0);
        assert_eq!(trades[1].trade_return_pct, 3.0);
        assert_eq!(report.mean_return_pct, Some(2.5));
        assert_eq!(report.hit_rate, Some(1.0));
        assert_eq!(report.skipped.len(), 1);
        let (_, empty) = backtest(&[], &prices, 1);
        assert_eq!((empty.n_trades, empty.mean_return_pct), (0, None));
    }

    #[test]
    fn positions_follow_kind() {
        let a = vec![
            Announcement { ticker: "A".into(), kind: TransitionKind::Addition, announce_date: d("2024-03-04") },
            Announcement { ticker: "B".into(), kind: TransitionKind::Removal, announce_date: d("2024-03-05") },
        ];
        let p = build_positions(&a);
        assert_eq!(p[0].side, Side::Long);
        assert_eq!(p[1].side, Side::Short);
        assert!(build_positions::<Announcement>(&[]).is_empty());
    }
}
