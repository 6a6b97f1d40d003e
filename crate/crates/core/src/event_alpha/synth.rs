//! Synthetic announcements and daily prices for a panel's membership
//! changes, with a planted post-announcement move.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Announcement, EventError, PriceSeries};
use crate::calendar::{add_weekdays, sub_weekdays, weekday_on_or_before};
use crate::panel_store::{Panel, TransitionKind};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EventSynthConfig {
    pub seed: u64,
    /// Calendar days between announcement and the quarter end it precedes.
    pub announce_lead_days: u64,
    /// Trading days of prices before / after each announcement.
    pub days_before: usize,
    pub days_after: usize,
    /// Percent jump on the first trading day after an addition; removals
    /// get the negative.
    pub jump_pct: f64,
    /// Extra percent drift spread over trading days 1..=7.
    pub drift_pct: f64,
    pub daily_noise_pct: f64,
    /// Adds two extreme events, an addition for `IR` and a removal for
    /// `AIV`, to exercise the exclusion list.
    pub outliers: bool,
}

impl Default for EventSynthConfig {
    fn default() -> Self {
        EventSynthConfig {
            seed: 11,
            announce_lead_days: 14,
            days_before: 5,
            days_after: 10,
            jump_pct: 2.5,
            drift_pct: 1.0,
            daily_noise_pct: 1.0,
            outliers: true,
        }
    }
}

impl EventSynthConfig {
    pub fn validate(&self) -> Result<(), EventError> {
        if self.days_after < 7 {
            return Err(EventError::Config("days_after must be >= 7".into()));
        }
        for (name, v) in [("jump_pct", self.jump_pct), ("drift_pct", self.drift_pct)] {
            if !v.is_finite() || v.abs() >= 50.0 {
                return Err(EventError::Config(format!("{name} must be finite and below 50 in magnitude")));
            }
        }
        if !(self.daily_noise_pct.is_finite() && self.daily_noise_pct >= 0.0) {
            return Err(EventError::Config("daily_noise_pct must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEvents {
    pub announcements: Vec<Announcement>,
    pub prices: BTreeMap<String, PriceSeries>,
}

/// Announcement date for a change effective at `quarter_end`.
pub fn announce_date(quarter_end: NaiveDate, lead_days: u64) -> NaiveDate {
    weekday_on_or_before(quarter_end - Days::new(lead_days))
}

fn window<R: Rng>(
    rng: &mut R,
    cfg: &EventSynthConfig,
    date: NaiveDate,
    sign: f64,
    scale: f64,
) -> Vec<(NaiveDate, f64)> {
    let noise = Normal::new(0.0, cfg.daily_noise_pct / 100.0).expect("validated");
    let start = sub_weekdays(date, cfg.days_before);
    let mut price: f64 = rng.random_range(20.0..120.0);
    let mut out = Vec::with_capacity(cfg.days_before + cfg.days_after + 1);
    for k in 0..=(cfg.days_before + cfg.days_after) {
        if k > 0 {
            let t = k as i64 - cfg.days_before as i64;
            let mut r = noise.sample(rng);
            if t == 1 {
                r += sign * scale * cfg.jump_pct / 100.0;
            }
            if (1..=7).contains(&t) {
                r += sign * scale * cfg.drift_pct / 700.0;
            }
            price *= 1.0 + r;
        }
        out.push((add_weekdays(start, k), (price * 1e4).round() / 1e4));
    }
    out
}

/// One announcement per panel transition, dated `announce_lead_days`
/// before its quarter end, with a price window around it.
pub fn generate_events(panel: &Panel, cfg: &EventSynthConfig) -> Result<SyntheticEvents, EventError> {
    cfg.validate()?;
    let mut announcements: Vec<Announcement> = panel
        .transitions()
        .into_iter()
        .map(|t| Announcement {
            ticker: t.id.ticker.clone(),
            kind: t.kind,
            announce_date: announce_date(t.quarter_end, cfg.announce_lead_days),
        })
        .collect();
    if cfg.outliers {
        if let Some(&q) = panel.quarters().get(1) {
            let date = announce_date(q, cfg.announce_lead_days);
            announcements.push(Announcement { ticker: "IR".into(), kind: TransitionKind::Addition, announce_date: date });
            announcements.push(Announcement { ticker: "AIV".into(), kind: TransitionKind::Removal, announce_date: date });
        }
    }
    announcements.sort_by(|a, b| (a.announce_date, &a.ticker).cmp(&(b.announce_date, &b.ticker)));

    let mut raw: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for (i, a) in announcements.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, i as u64);
        let sign = match a.kind {
            TransitionKind::Addition => 1.0,
            TransitionKind::Removal => -1.0,
        };
        let scale = if a.ticker == "IR" || a.ticker == "AIV" { 8.0 } else { 1.0 };
        let pts = raw.entry(a.ticker.clone()).or_default();
        for p in window(&mut r, cfg, a.announce_date, sign, scale) {
            // windows of one ticker are a quarter apart; keep the first on overlap
            if pts.last().is_none_or(|last| last.0 < p.0) {
                pts.push(p);
            }
        }
    }
    let prices = raw
        .into_iter()
        .map(|(t, pts)| PriceSeries::new(&t, pts).map(|s| (t, s)))
        .collect::<Result<_, _>>()?;
    Ok(SyntheticEvents { announcements, prices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_alpha::{aggregate_stats, exclude_outliers, join_events};
    use crate::panel_store::{generate_synthetic, SynthConfig};

    fn small() -> SyntheticEvents {
        let p = generate_synthetic(&SynthConfig { n_firms: 80, n_quarters: 10, ..Default::default() }).unwrap();
        generate_events(&p, &EventSynthConfig::default()).unwrap()
    }

    #[test]
    fn every_announcement_joins() {
        let ev = small();
        assert!(ev.announcements.len() > 4);
        let (ok, failed) = join_events(&ev.announcements, &ev.prices);
        assert!(failed.is_empty(), "{failed:?}");
        assert_eq!(ok.len(), ev.announcements.len());
    }

    #[test]
    fn planted_sign_shows_in_means() {
        let ev = small();
        let (ok, _) = join_events(&ev.announcements, &ev.prices);
        let (kept, _) = exclude_outliers(&ok, &["IR".into(), "AIV".into()]);
        let t = aggregate_stats(&kept, &[]).unwrap();
        assert!(t.block(TransitionKind::Addition, 1).unwrap().mean > 0.5);
        assert!(t.block(TransitionKind::Removal, 1).unwrap().mean < -0.5);
    }

    #[test]
    fn deterministic() {
        assert_eq!(small(), small());
    }

    #[test]
    fn announcement_is_weekday_before_quarter_end() {
        let q: NaiveDate = "2024-03-29".parse().unwrap();
        assert_eq!(announce_date(q, 14), "2024-03-15".parse::<NaiveDate>().unwrap());
        let sat_target: NaiveDate = "2024-03-30".parse().unwrap();
        assert_eq!(announce_date(sat_target, 14), "2024-03-15".parse::<NaiveDate>().unwrap());
    }
}
