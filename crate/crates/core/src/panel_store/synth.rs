//! Seeded synthetic panel with a planted membership signal.
//!
//! Each firm carries persistent AR(1) latent factors, one per metric plus a
//! shared size factor. Observed metrics are skewed monotone transforms of the
//! latents. Membership is sticky: each quarter a member leaves (or a
//! non-member joins) with a probability that is a logistic function of last
//! quarter's weighted latent score plus Gaussian noise, scaled so that
//! roughly `churn_rate` of members flip per quarter.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Field, FirmQuarter, Metric, Panel, PanelError, SecurityId, N_FIELDS};
use crate::calendar;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_firms: usize,
    pub n_quarters: usize,
    pub churn_rate: f64,
    /// Field name -> coefficient on that field's latent factor.
    pub signal_weights: BTreeMap<String, f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_firms: 550,
            n_quarters: 42,
            churn_rate: 0.05,
            signal_weights: [
                ("avg_vol_3m", 1.0),
                ("num_analysts", 1.0),
                ("operating_income", 1.0),
                ("book_value_per_share", 1.0),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            noise_sd: 0.3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), PanelError> {
        let fail = |m: String| Err(PanelError::Config(m));
        if self.n_firms == 0 || self.n_quarters == 0 {
            return fail("n_firms and n_quarters must be at least 1".into());
        }
        if self.n_firms > 99_999 {
            return fail("n_firms must fit a 6-character ticker (at most 99999)".into());
        }
        if !(0.0..=1.0).contains(&self.churn_rate) {
            return fail(format!("churn_rate {} outside [0, 1]", self.churn_rate));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return fail(format!("noise_sd {} must be finite and >= 0", self.noise_sd));
        }
        for (name, w) in &self.signal_weights {
            if Field::from_name(name).is_none() {
                return fail(format!("unknown signal field {name:?}"));
            }
            if !w.is_finite() {
                return fail(format!("signal weight for {name} is not finite"));
            }
        }
        Ok(())
    }
}

const PERSISTENCE: f64 = 0.95;
const MEMBER_FRACTION: f64 = 0.6;
const STEEPNESS: f64 = 3.0;
const MISSING_RATE: f64 = 0.15;

const SIC_CODES: [u16; 14] = [
    100, 1311, 1531, 2834, 3571, 3674, 4512, 4911, 5141, 5311, 6021, 6311, 7372, 9111,
];

/// Loading of each field on the shared size factor.
fn size_loading(field: Field) -> f64 {
    match field {
        Field::MarketCap => 0.9,
        Field::TotalAssets | Field::TotalLiabilities => 0.5,
        Field::NetIncome | Field::OperatingIncome | Field::CashFlowOps => 0.35,
        Field::Volume | Field::AvgVol3m | Field::NumAnalysts => 0.3,
        Field::BookValuePerShare => 0.2,
        _ => 0.0,
    }
}

fn observe(field: Field, u: f64) -> f64 {
    let v = match field {
        Field::Price => (3.5 + 0.6 * u).exp(),
        Field::MarketCap => (21.5 + 1.2 * u).exp(),
        Field::Volume => (13.5 + 0.9 * u).exp(),
        Field::TotalAssets => (22.0 + 1.1 * u).exp(),
        Field::TotalLiabilities => (21.5 + 1.1 * u).exp(),
        Field::NetIncome => 1e8 * ((0.8 * u).exp() - 0.6),
        Field::OperatingIncome => 1e8 * ((0.9 * u).exp() - 0.4),
        Field::CashFlowOps => 1e8 * ((0.8 * u).exp() - 0.3),
        Field::CurrentRatio => (0.3 + 0.4 * u).exp(),
        Field::DebtToEquity => (0.6 * u).exp(),
        Field::Roa => 0.05 + 0.05 * u,
        Field::Roe => 0.1 + 0.1 * u,
        Field::Eps => 1.5 * ((0.6 * u).exp() - 0.8),
        Field::BookValuePerShare => (3.0 + 0.7 * u).exp(),
        Field::NumAnalysts => (2.2 + 0.5 * u).exp().round(),
        Field::AuditorChanges => ((u - 1.2).max(0.0) * 1.5).floor(),
        Field::Restatements => ((u - 1.0).max(0.0) * 2.0).floor(),
        Field::Ret1m => 0.01 + 0.08 * u,
        Field::AvgVol3m => (13.0 + 1.0 * u).exp(),
    };
    // six significant digits keeps the CSV compact
    let mag = v.abs();
    if mag == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(5 - mag.log10().floor() as i32);
    (v * scale).round() / scale
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Panel, PanelError> {
    cfg.validate()?;
    let n = cfg.n_firms;
    let quarters = calendar::quarter_ends(2013, 1, cfg.n_quarters);

    let mut latent_rng = rng::stream(cfg.seed, 1);
    let mut label_rng = rng::stream(cfg.seed, 2);
    let mut mask_rng = rng::stream(cfg.seed, 3);
    let mut static_rng = rng::stream(cfg.seed, 4);

    let weights: Vec<(usize, f64)> = cfg
        .signal_weights
        .iter()
        .map(|(k, w)| (Field::from_name(k).expect("validated").index(), *w))
        .collect();
    let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();

    let sic: Vec<u16> = (0..n)
        .map(|_| SIC_CODES[static_rng.random_range(0..SIC_CODES.len())])
        .collect();

    let innovation = (1.0 - PERSISTENCE * PERSISTENCE).sqrt();
    let mut size: Vec<f64> = (0..n).map(|_| latent_rng.sample(StandardNormal)).collect();
    let mut idio: Vec<[f64; N_FIELDS]> = (0..n)
        .map(|_| std::array::from_fn(|_| latent_rng.sample(StandardNormal)))
        .collect();

    let mut records = Vec::with_capacity(n * cfg.n_quarters);
    let mut member = vec![false; n];
    let mut prev_score = vec![0.0; n];

    for (q, &date) in quarters.iter().enumerate() {
        if q > 0 {
            for i in 0..n {
                size[i] = PERSISTENCE * size[i] + innovation * latent_rng.sample::<f64, _>(StandardNormal);
                for z in idio[i].iter_mut() {
                    *z = PERSISTENCE * *z + innovation * latent_rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let latents: Vec<[f64; N_FIELDS]> = (0..n)
            .map(|i| {
                std::array::from_fn(|f| {
                    let field = Field::ALL[f];
                    if field == Field::Ret1m {
                        // monthly returns carry no persistence
                        return latent_rng.sample(StandardNormal);
                    }
                    let a = size_loading(field);
                    a * size[i] + (1.0 - a * a).sqrt() * idio[i][f]
                })
            })
            .collect();
        let score: Vec<f64> = latents
            .iter()
            .map(|u| {
                if norm == 0.0 {
                    0.0
                } else {
                    weights.iter().map(|(f, w)| w * u[*f]).sum::<f64>() / norm
                }
            })
            .collect();

        if q == 0 {
            let noisy: Vec<f64> = score
                .iter()
                .map(|s| s + cfg.noise_sd * label_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut sorted = noisy.clone();
            sorted.sort_by(f64::total_cmp);
            let cut_idx = ((1.0 - MEMBER_FRACTION) * n as f64).floor() as usize;
            let cut = sorted[cut_idx.min(n - 1)];
            for i in 0..n {
                member[i] = noisy[i] >= cut;
            }
        } else {
            let members = member.iter().filter(|m| **m).count();
            let outsiders = n - members;
            let inflow_scale = if outsiders == 0 {
                0.0
            } else {
                members as f64 / outsiders as f64
            };
            let cut = quantile_cut(&prev_score);
            for i in 0..n {
                let eps: f64 = label_rng.sample(StandardNormal);
                let x = STEEPNESS * (prev_score[i] + cfg.noise_sd * eps - cut);
                let u: f64 = label_rng.random();
                if member[i] {
                    let p = (2.0 * cfg.churn_rate * sigmoid(-x)).min(1.0);
                    if u < p {
                        member[i] = false;
                    }
                } else {
                    let p = (2.0 * cfg.churn_rate * sigmoid(x) * inflow_scale).min(1.0);
                    if u < p {
                        member[i] = true;
                    }
                }
            }
        }

        for i in 0..n {
            let metrics: [Metric; N_FIELDS] = std::array::from_fn(|f| {
                let field = Field::ALL[f];
                let value = observe(field, latents[i][f]);
                let masked = field.is_fundamental() && mask_rng.random::<f64>() < MISSING_RATE;
                if masked {
                    Metric::Missing
                } else {
                    Metric::Present(value)
                }
            });
            let id = SecurityId::new(10_001 + i as u32, 1_001 + i as u32, format!("F{:05}", i + 1))
                .expect("generated ids are valid");
            records.push(FirmQuarter {
                id,
                quarter_end: date,
                metrics,
                sic_code: Some(sic[i]),
                in_sp500: member[i],
            });
        }
        prev_score = score;
    }

    let (panel, dropped) = Panel::from_records(records);
    debug_assert!(dropped.is_empty());
    Ok(panel)
}

/// Score threshold separating the top `MEMBER_FRACTION` of firms.
fn quantile_cut(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((1.0 - MEMBER_FRACTION) * sorted.len() as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}
