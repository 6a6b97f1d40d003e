//! End-to-end orchestration: each stage computes what it needs from the
//! configuration (reusing earlier stages within one run) and writes its
//! reports.

mod config;
mod report;

pub use config::{ForestSection, Overrides, RunConfig, SplitSizes};
pub use report::{audit, sha256_hex, AuditReport, Manifest, ReportWriter, MANIFEST};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use ndarray::{Array2, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::evaluation::{self, make_chrono_split, make_folds, score, FoldPlan, GridResult, MetricsReport, SplitPlan};
use crate::event_alpha::{
    self, aggregate_stats, backtest, build_positions, exclude_outliers, join_events, Announcement, PortfolioReport,
    PriceSeries, StatTable, TradeRecord, HORIZONS,
};
use crate::feature_lab::{
    engineer, fit_transform, impute_rolling_mean, prune_collinear, write_matrix_csv, ColumnMeta, DroppedColumn,
    EngineeredPanel, FeatureMatrix, ImputationReport, RowKey, TransformState,
};
use crate::learners::{
    self, fit_forest, label, train_linear_svc, train_logistic, ForestModel, ForestSettings, LinearSvcModel,
    LogisticModel, TrainedModel, TrainingSet,
};
use crate::panel_store::{self, generate_synthetic, load_panel, top_k_by_market_cap, write_panel, Panel, PanelError};
use crate::shapley::{self, explain_rows, summarize, ShapSummary};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status: 2 for configuration problems, 3 for data and
    /// output problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Io { .. } => 3,
        }
    }
}

fn data_err(e: impl fmt::Display) -> PipelineError {
    PipelineError::Data(e.to_string())
}

fn panel_err(origin: &str, e: PanelError) -> PipelineError {
    match e {
        PanelError::Validation(rows) => {
            let shown: Vec<String> = rows.iter().take(20).map(|r| r.to_string()).collect();
            let more = rows.len().saturating_sub(shown.len());
            let tail = if more > 0 { format!("; {more} more") } else { String::new() };
            PipelineError::Data(format!("{origin}: {} invalid row(s): {}{tail}", rows.len(), shown.join("; ")))
        }
        PanelError::Config(m) => PipelineError::Config(m),
        other => PipelineError::Data(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Features,
    Train,
    Evaluate,
    Explain,
    Events,
    Backtest,
    Pipeline,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Features,
        Stage::Train,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Events,
        Stage::Backtest,
        Stage::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Events => "events",
            Stage::Backtest => "backtest",
            Stage::Pipeline => "pipeline",
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Engineered, pruned and standardized features with the chronological
/// split applied.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub engineered: EngineeredPanel,
    pub matrix: FeatureMatrix,
    pub state: TransformState,
    pub imputation: ImputationReport,
    pub dropped: Vec<DroppedColumn>,
    pub split: SplitPlan,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FeatureSet {
    pub fn x(&self, rows: &[usize]) -> Array2<f64> {
        self.matrix.values.select(Axis(0), rows)
    }

    pub fn y(&self, rows: &[usize]) -> Vec<u8> {
        rows.iter().map(|&i| self.engineered.labels[i]).collect()
    }

    pub fn quarters_of(&self, rows: &[usize]) -> Vec<NaiveDate> {
        rows.iter().map(|&i| self.matrix.row_keys[i].quarter_end).collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.matrix.column_names()
    }
}

/// Builds the feature set from a panel: impute, engineer, split by quarter,
/// then prune and standardize on the training quarters only.
pub fn build_features(panel: &Panel, cfg: &RunConfig) -> Result<FeatureSet, PipelineError> {
    let (imputed, imputation) = impute_rolling_mean(panel);
    let engineered = engineer(&imputed, &imputation);
    let s = cfg.split;
    let split = make_chrono_split(panel.quarters(), s.n_train, s.n_val, s.n_test).map_err(data_err)?;
    let set = |q: &[NaiveDate]| q.iter().copied().collect::<BTreeSet<_>>();
    let train_mask = engineered.mask_for_quarters(&set(&split.train_quarters));
    if !train_mask.iter().any(|&b| b) {
        return Err(PipelineError::Data("no engineered rows fall in the training quarters".into()));
    }
    let (pruned, mut dropped) = prune_collinear(&engineered.matrix, cfg.prune_threshold, &train_mask).map_err(data_err)?;
    let engineered = EngineeredPanel { matrix: pruned, ..engineered };
    let (matrix, state, more) = fit_transform(&engineered, &train_mask).map_err(data_err)?;
    dropped.extend(more);
    let rows_in = |q: &[NaiveDate]| {
        let mask = engineered.mask_for_quarters(&set(q));
        (0..mask.len()).filter(|&i| mask[i]).collect::<Vec<_>>()
    };
    let (train, val, test) = (rows_in(&split.train_quarters), rows_in(&split.val_quarters), rows_in(&split.test_quarters));
    Ok(FeatureSet { engineered, matrix, state, imputation, dropped, split, train, val, test })
}

#[derive(Debug, Clone)]
pub struct Models {
    pub logistic: LogisticModel,
    pub forest: ForestModel,
    pub svc: LinearSvcModel,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelScores {
    pub model: String,
    pub validation_f1: f64,
    pub test_f1: f64,
    pub cv_mean_f1: f64,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct EvaluationState {
    pub folds: FoldPlan,
    pub grid: GridResult,
    pub tuned_forest: ForestModel,
    pub scores: Vec<ModelScores>,
    pub selected: String,
    /// Probabilities of the selected model on the test rows.
    pub selected_test_proba: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EventData {
    pub announcements: Vec<Announcement>,
    pub prices: BTreeMap<String, PriceSeries>,
}

/// One run of the configured pipeline. Stage results are cached so a
/// command that needs earlier stages computes each of them once.
pub struct Run {
    cfg: RunConfig,
    hash: String,
    writer: ReportWriter,
    panel: Option<Panel>,
    panel_duplicates: usize,
    features: Option<FeatureSet>,
    models: Option<Models>,
    evaluation: Option<EvaluationState>,
    events: Option<EventData>,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Run, PipelineError> {
        cfg.validate()?;
        let hash = cfg.hash();
        let writer = ReportWriter::new(&cfg.out_dir, &hash, cfg.seed)?;
        Ok(Run {
            cfg,
            hash,
            writer,
            panel: None,
            panel_duplicates: 0,
            features: None,
            models: None,
            evaluation: None,
            events: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Runs `stage` (and whatever it depends on), then writes the manifest.
    pub fn execute(mut self, stage: Stage) -> Result<Manifest, PipelineError> {
        match stage {
            Stage::Synth => self.stage_synth()?,
            Stage::Features => self.stage_features()?,
            Stage::Train => self.stage_train()?,
            Stage::Evaluate => self.stage_evaluate()?,
            Stage::Explain => self.stage_explain()?,
            Stage::Events => self.stage_events()?,
            Stage::Backtest => self.stage_backtest()?,
            Stage::Pipeline => {
                if self.cfg.synth.is_some() {
                    self.stage_synth()?;
                }
                self.stage_features()?;
                self.stage_train()?;
                self.stage_evaluate()?;
                self.stage_explain()?;
                if self.events_available() {
                    self.stage_events()?;
                    self.stage_backtest()?;
                } else {
                    log::warn!("no announcements or prices configured; skipping events and backtest");
                }
            }
        }
        self.writer.finish()
    }

    fn panel(&mut self) -> Result<&Panel, PipelineError> {
        if self.panel.is_none() {
            let raw = match (&self.cfg.panel_path, &self.cfg.synth) {
                (Some(path), _) => {
                    let origin = path.display().to_string();
                    let loaded = load_panel(path).map_err(|e| panel_err(&origin, e))?;
                    if loaded.warning_count() > 0 {
                        log::warn!("{origin}: {} duplicate rows dropped", loaded.warning_count());
                    }
                    self.panel_duplicates = loaded.warning_count();
                    loaded.panel
                }
                (None, Some(s)) => generate_synthetic(s).map_err(|e| panel_err("synth", e))?,
                (None, None) => unreachable!("validated"),
            };
            if raw.is_empty() {
                return Err(PipelineError::Data("panel has no records".into()));
            }
            let panel = match self.cfg.top_k {
                Some(k) => top_k_by_market_cap(&raw, k),
                None => raw,
            };
            self.panel = Some(panel);
        }
        Ok(self.panel.as_ref().expect("set above"))
    }

    fn features(&mut self) -> Result<&FeatureSet, PipelineError> {
        if self.features.is_none() {
            let cfg = self.cfg.clone();
            let fs = build_features(self.panel()?, &cfg)?;
            for (part, rows) in [("training", &fs.train), ("validation", &fs.val), ("test", &fs.test)] {
                if rows.is_empty() {
                    return Err(PipelineError::Data(format!("no engineered rows in the {part} quarters")));
                }
            }
            self.features = Some(fs);
        }
        Ok(self.features.as_ref().expect("set above"))
    }

    fn forest_settings(&self) -> ForestSettings {
        let f = self.cfg.forest;
        ForestSettings {
            n_estimators: f.n_estimators,
            max_depth: f.max_depth,
            min_samples_split: f.min_samples_split,
            features_per_split: f.features_per_split,
            bootstrap: true,
            seed: self.cfg.seed,
        }
    }

    fn models(&mut self) -> Result<&Models, PipelineError> {
        if self.models.is_none() {
            let forest_settings = self.forest_settings();
            let cfg = self.cfg.clone();
            let fs = self.features()?;
            let (x, y) = (fs.x(&fs.train), fs.y(&fs.train));
            let logistic = train_logistic(x.view(), &y, &cfg.logistic).map_err(data_err)?;
            let svc = train_linear_svc(x.view(), &y, &cfg.svc).map_err(data_err)?;
            let data = TrainingSet::new(x.view(), &y).map_err(data_err)?;
            let forest = fit_forest(&data, &forest_settings).map_err(data_err)?;
            self.models = Some(Models { logistic, forest, svc });
        }
        Ok(self.models.as_ref().expect("set above"))
    }

    fn evaluation(&mut self) -> Result<&EvaluationState, PipelineError> {
        if self.evaluation.is_none() {
            let cfg = self.cfg.clone();
            let base = ForestSettings { n_estimators: 1, ..self.forest_settings() };
            self.models()?;
            let models = self.models.clone().expect("trained");
            let fs = self.features()?;
            let (xt, yt, qt) = (fs.x(&fs.train), fs.y(&fs.train), fs.quarters_of(&fs.train));
            let (xv, yv) = (fs.x(&fs.val), fs.y(&fs.val));
            let (xs, ys) = (fs.x(&fs.test), fs.y(&fs.test));
            let row_quarters: BTreeSet<NaiveDate> = qt.iter().copied().collect();
            let cv_quarters: Vec<NaiveDate> = row_quarters.into_iter().collect();
            let folds = make_folds(&cv_quarters, cfg.cv_folds).map_err(data_err)?;
            log::info!("grid search: {} combinations x {} folds", cfg.grid.combinations().len(), folds.folds.len());
            let grid = evaluation::grid_search(xt.view(), &yt, &qt, &cfg.grid, &folds, &base).map_err(data_err)?;
            let tuned_settings = ForestSettings {
                n_estimators: grid.best.n_estimators,
                max_depth: grid.best.max_depth,
                min_samples_split: grid.best.min_samples_split,
                ..base
            };
            let tuned = fit_forest(&TrainingSet::new(xt.view(), &yt).map_err(data_err)?, &tuned_settings).map_err(data_err)?;

            // cross-validated F1 of the linear models on the same folds
            let cv_linear = |kind: &str| -> Result<f64, PipelineError> {
                let mut total = 0.0;
                for fold in &folds.folds {
                    let tr: BTreeSet<_> = fold.train_quarters.iter().collect();
                    let te: BTreeSet<_> = fold.test_quarters.iter().collect();
                    let a: Vec<usize> = (0..yt.len()).filter(|&i| tr.contains(&qt[i])).collect();
                    let b: Vec<usize> = (0..yt.len()).filter(|&i| te.contains(&qt[i])).collect();
                    let (xa, ya) = (xt.select(Axis(0), &a), a.iter().map(|&i| yt[i]).collect::<Vec<_>>());
                    let xb = xt.select(Axis(0), &b);
                    let yb: Vec<u8> = b.iter().map(|&i| yt[i]).collect();
                    let proba = match kind {
                        "logistic" => train_logistic(xa.view(), &ya, &cfg.logistic).map_err(data_err)?.predict_proba(xb.view()),
                        _ => train_linear_svc(xa.view(), &ya, &cfg.svc).map_err(data_err)?.predict_proba(xb.view()),
                    };
                    let pred: Vec<u8> = proba.into_iter().map(label).collect();
                    total += score(&yb, &pred).map_err(data_err)?.f1_positive;
                }
                Ok(total / folds.folds.len() as f64)
            };

            let candidates: Vec<(String, TrainedModel, f64)> = vec![
                ("random_forest".into(), TrainedModel::Forest(tuned.clone()), grid.best_mean_f1),
                ("logistic_regression".into(), TrainedModel::Logistic(models.logistic.clone()), cv_linear("logistic")?),
                ("linear_svc".into(), TrainedModel::LinearSvc(models.svc.clone()), cv_linear("svc")?),
            ];
            let mut scores = Vec::new();
            let mut test_proba = Vec::new();
            for (name, model, cv) in &candidates {
                let pv = learners::predict(model, xv.view()).map_err(data_err)?;
                let ps = learners::predict(model, xs.view()).map_err(data_err)?;
                let mut val = score(&yv, &pv.labels).map_err(data_err)?;
                let mut test = score(&ys, &ps.labels).map_err(data_err)?;
                val.cv_mean_f1 = Some(*cv);
                test.cv_mean_f1 = Some(*cv);
                scores.push(ModelScores {
                    model: name.clone(),
                    validation_f1: val.f1_positive,
                    test_f1: test.f1_positive,
                    cv_mean_f1: *cv,
                    validation: val,
                    test,
                });
                test_proba.push(ps.probabilities);
            }
            // highest validation F1; earlier entry on ties
            let mut sel = 0;
            for (i, s) in scores.iter().enumerate() {
                if s.validation_f1 > scores[sel].validation_f1 {
                    sel = i;
                }
            }
            self.evaluation = Some(EvaluationState {
                folds,
                grid,
                tuned_forest: tuned,
                selected: scores[sel].model.clone(),
                selected_test_proba: test_proba.swap_remove(sel),
                scores,
            });
        }
        Ok(self.evaluation.as_ref().expect("set above"))
    }

    fn events_available(&self) -> bool {
        self.cfg.announcements_path.is_some() || self.cfg.synth.is_some()
    }

    fn events(&mut self) -> Result<&EventData, PipelineError> {
        if self.events.is_none() {
            let data = match (&self.cfg.announcements_path, &self.cfg.prices_path) {
                (Some(a), Some(p)) => EventData {
                    announcements: event_alpha::load_announcements(a).map_err(data_err)?,
                    prices: event_alpha::load_prices(p).map_err(data_err)?,
                },
                _ if self.cfg.synth.is_some() => {
                    let cfg = self.cfg.event_synth.clone();
                    let ev = event_alpha::generate_events(self.panel()?, &cfg).map_err(data_err)?;
                    EventData { announcements: ev.announcements, prices: ev.prices }
                }
                _ => {
                    return Err(PipelineError::Config(
                        "events need announcements_path and prices_path, or a synthetic panel".into(),
                    ))
                }
            };
            self.events = Some(data);
        }
        Ok(self.events.as_ref().expect("set above"))
    }

    fn stage_synth(&mut self) -> Result<(), PipelineError> {
        let Some(synth) = self.cfg.synth.clone() else {
            return Err(PipelineError::Config("the synth command needs a synth block, not panel_path".into()));
        };
        // the written panel is the raw generator output, before the top_k universe filter
        let raw = generate_synthetic(&synth).map_err(|e| panel_err("synth", e))?;
        let mut buf = Vec::new();
        write_panel(&raw, &mut buf).map_err(data_err)?;
        self.writer.bytes("panel.csv", &buf)?;
        let events = self.events()?.clone();
        let mut a = Vec::new();
        event_alpha::write_announcements(&events.announcements, &mut a).map_err(data_err)?;
        self.writer.bytes("announcements.csv", &a)?;
        let mut p = Vec::new();
        event_alpha::write_prices(&events.prices, &mut p).map_err(data_err)?;
        self.writer.bytes("prices.csv", &p)?;

        #[derive(Serialize)]
        struct SynthReport<'a> {
            config: &'a panel_store::SynthConfig,
            records: usize,
            quarters: usize,
            first_quarter: Option<NaiveDate>,
            last_quarter: Option<NaiveDate>,
            member_share: f64,
            additions: usize,
            removals: usize,
            announcements: usize,
            price_tickers: usize,
        }
        let transitions = raw.transitions();
        let count = |k| transitions.iter().filter(|t| t.kind == k).count();
        let report = SynthReport {
            config: &synth,
            records: raw.len(),
            quarters: raw.quarters().len(),
            first_quarter: raw.quarters().first().copied(),
            last_quarter: raw.quarters().last().copied(),
            member_share: raw.records().iter().filter(|r| r.in_sp500).count() as f64 / raw.len().max(1) as f64,
            additions: count(panel_store::TransitionKind::Addition),
            removals: count(panel_store::TransitionKind::Removal),
            announcements: events.announcements.len(),
            price_tickers: events.prices.len(),
        };
        self.writer.json("synth.json", "synth", &report)?;
        Ok(())
    }

    fn stage_features(&mut self) -> Result<(), PipelineError> {
        let top_k = self.cfg.top_k;
        let threshold = self.cfg.prune_threshold;
        let panel_records = self.panel()?.len();
        let duplicates = self.panel_duplicates;
        let fs = self.features()?.clone();
        let mut buf = Vec::new();
        write_matrix_csv(&fs.matrix, &mut buf).map_err(data_err)?;
        self.writer.bytes("features.csv", &buf)?;

        let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
        for e in &fs.engineered.excluded {
            // "missing <column>" reasons collapse to one bucket per column
            *excluded.entry(e.reason.clone()).or_default() += 1;
        }
        #[derive(Serialize)]
        struct Rows {
            train: usize,
            validation: usize,
            test: usize,
        }
        #[derive(Serialize)]
        struct FeatureReport<'a> {
            panel_records: usize,
            duplicates_dropped: usize,
            top_k: Option<usize>,
            engineered_rows: usize,
            excluded_rows: BTreeMap<String, usize>,
            imputation: &'a ImputationReport,
            prune_threshold: f64,
            dropped_columns: &'a [DroppedColumn],
            columns: Vec<ColumnMeta>,
            split: &'a SplitPlan,
            rows: Rows,
            transform: &'a TransformState,
            fitted_on: &'static str,
        }
        let report = FeatureReport {
            panel_records,
            duplicates_dropped: duplicates,
            top_k,
            engineered_rows: fs.matrix.n_rows(),
            excluded_rows: excluded,
            imputation: &fs.imputation,
            prune_threshold: threshold,
            dropped_columns: &fs.dropped,
            columns: fs.matrix.columns.clone(),
            split: &fs.split,
            rows: Rows { train: fs.train.len(), validation: fs.val.len(), test: fs.test.len() },
            transform: &fs.state,
            fitted_on: "imputation uses prior quarters only; correlations, means, sds and vocabulary use training quarters only",
        };
        self.writer.json("features.json", "features", &report)?;
        Ok(())
    }

    fn stage_train(&mut self) -> Result<(), PipelineError> {
        let m = self.models()?.clone();
        let fs = self.features()?;
        let train_rows = fs.train.len();
        let names = fs.column_names();
        for (file, model) in [
            ("model_logistic.json", TrainedModel::Logistic(m.logistic.clone())),
            ("model_forest.json", TrainedModel::Forest(m.forest.clone())),
            ("model_linear_svc.json", TrainedModel::LinearSvc(m.svc.clone())),
        ] {
            let mut text = model.to_json().map_err(data_err)?;
            text.push('\n');
            self.writer.bytes(file, text.as_bytes())?;
        }
        #[derive(Serialize)]
        struct TrainReport {
            training_rows: usize,
            features: Vec<String>,
            logistic_final_loss: f64,
            logistic_weights: BTreeMap<String, f64>,
            svc_objective: f64,
            svc_probability: &'static str,
            forest_trees: usize,
            forest_features_per_split: usize,
            forest_mean_leaves: f64,
            forest_max_depth: usize,
        }
        let f = &m.forest;
        let report = TrainReport {
            training_rows: train_rows,
            logistic_weights: names.iter().cloned().zip(m.logistic.weights.iter().copied()).collect(),
            features: names,
            logistic_final_loss: m.logistic.final_loss,
            svc_objective: m.svc.objective,
            svc_probability: "sigmoid of the margin; a score, not a calibrated probability",
            forest_trees: f.trees.len(),
            forest_features_per_split: f.features_per_split,
            forest_mean_leaves: f.trees.iter().map(|t| t.n_leaves()).sum::<usize>() as f64 / f.trees.len() as f64,
            forest_max_depth: f.trees.iter().map(|t| t.depth()).max().unwrap_or(0),
        };
        self.writer.json("train.json", "train", &report)?;
        Ok(())
    }

    fn stage_evaluate(&mut self) -> Result<(), PipelineError> {
        let ev = self.evaluation()?.clone();
        let split = self.features()?.split.clone();
        #[derive(Serialize)]
        struct EvalReport<'a> {
            split: &'a SplitPlan,
            folds: &'a FoldPlan,
            cv_note: &'static str,
            grid: &'a GridResult,
            chosen_params: evaluation::GridParams,
            models: &'a [ModelScores],
            selected_model: &'a str,
        }
        let report = EvalReport {
            split: &split,
            folds: &ev.folds,
            cv_note: "cross-validation uses expanding folds over the training quarters only",
            grid: &ev.grid,
            chosen_params: ev.grid.best,
            models: &ev.scores,
            selected_model: &ev.selected,
        };
        self.writer.json("evaluation.json", "evaluate", &report)?;
        Ok(())
    }

    fn stage_explain(&mut self) -> Result<(), PipelineError> {
        let forest = self.evaluation()?.tuned_forest.clone();
        let n = self.cfg.explain_rows;
        let fs = self.features()?;
        // evenly spaced test rows
        let total = fs.test.len();
        let take = n.min(total);
        let rows: Vec<usize> = (0..take).map(|k| fs.test[k * total / take]).collect();
        let keys: Vec<RowKey> = rows.iter().map(|&i| fs.matrix.row_keys[i]).collect();
        let names = fs.column_names();
        let x = fs.x(&rows);
        let vectors = explain_rows(&forest, x.view(), Some(&keys)).map_err(data_err)?;
        let worst = vectors
            .iter()
            .zip(x.rows())
            .map(|(v, r)| (v.reconstructed() - forest.predict_row(&r.to_vec())).abs())
            .fold(0.0, f64::max);
        let summary: ShapSummary = summarize(&vectors, &names).map_err(data_err)?;
        let mut buf = Vec::new();
        shapley::write_shap_csv(&vectors, &names, &mut buf).map_err(data_err)?;
        self.writer.bytes("shap_values.csv", &buf)?;
        #[derive(Serialize)]
        struct ExplainReport<'a> {
            method: &'static str,
            model: &'static str,
            rows_explained: usize,
            max_local_accuracy_error: f64,
            summary: &'a ShapSummary,
        }
        let report = ExplainReport {
            method: "exact tree Shapley values, path-dependent (training-cover weighted) expectation",
            model: "tuned random forest, probability output",
            rows_explained: vectors.len(),
            max_local_accuracy_error: worst,
            summary: &summary,
        };
        self.writer.json("shap_summary.json", "explain", &report)?;
        Ok(())
    }

    fn stage_events(&mut self) -> Result<(), PipelineError> {
        let excluded = self.cfg.exclude_tickers.clone();
        let ev = self.events()?.clone();
        let (joined, failures) = join_events(&ev.announcements, &ev.prices);
        for (a, why) in &failures {
            log::warn!("event {} {} {}: {why}", a.ticker, a.kind, a.announce_date);
        }
        let (kept, absent) = exclude_outliers(&joined, &excluded);
        let stats = aggregate_stats(&kept, &excluded).map_err(data_err)?;
        let mut buf = Vec::new();
        event_alpha::write_moves_csv(&kept, &mut buf).map_err(data_err)?;
        self.writer.bytes("event_moves.csv", &buf)?;
        #[derive(Serialize)]
        struct EventReport<'a> {
            convention: &'static str,
            announcements: usize,
            joined: usize,
            join_failures: Vec<String>,
            excluded_tickers_absent: &'a [String],
            events_after_exclusion: usize,
            stats: &'a StatTable,
        }
        let report = EventReport {
            convention: "close-to-close percent move from the announcement-date close; horizons count trading days in the price series",
            announcements: ev.announcements.len(),
            joined: joined.len(),
            join_failures: failures.iter().map(|(a, why)| format!("{} {} {}: {why}", a.ticker, a.kind, a.announce_date)).collect(),
            excluded_tickers_absent: &absent,
            events_after_exclusion: kept.len(),
            stats: &stats,
        };
        self.writer.json("event_stats.json", "events", &report)?;
        Ok(())
    }

    /// Predicted membership changes on the test quarters: a firm whose
    /// predicted label differs from its actual label one quarter earlier.
    fn predicted_transitions(&mut self) -> Result<(Vec<panel_store::TransitionEvent>, usize), PipelineError> {
        let proba = self.evaluation()?.selected_test_proba.clone();
        let panel = self.panel()?.clone();
        let fs = self.features()?;
        let mut predicted = Vec::new();
        for (k, &i) in fs.test.iter().enumerate() {
            let key = fs.matrix.row_keys[i];
            let qi = fs.engineered.quarter_index[i];
            let Some(prev) = qi.checked_sub(1).and_then(|q| panel.find(key.permno, q)) else {
                continue;
            };
            let was = panel.records()[prev].in_sp500;
            let now = label(proba[k]) == 1;
            let kind = match (was, now) {
                (false, true) => panel_store::TransitionKind::Addition,
                (true, false) => panel_store::TransitionKind::Removal,
                _ => continue,
            };
            predicted.push(panel_store::TransitionEvent { id: fs.engineered.ids[i].clone(), quarter_end: key.quarter_end, kind });
        }
        let test_q: BTreeSet<NaiveDate> = fs.split.test_quarters.iter().copied().collect();
        let actual = panel.transitions().into_iter().filter(|t| test_q.contains(&t.quarter_end)).count();
        Ok((predicted, actual))
    }

    fn stage_backtest(&mut self) -> Result<(), PipelineError> {
        let (predicted, actual) = self.predicted_transitions()?;
        let selected = self.evaluation()?.selected.clone();
        let quarters = self.panel()?.quarters().to_vec();
        let ev = self.events()?.clone();
        // announcement of the same ticker and kind inside the predicted quarter
        let mut by_key: HashMap<(&str, panel_store::TransitionKind), Vec<NaiveDate>> = HashMap::new();
        for a in &ev.announcements {
            by_key.entry((a.ticker.as_str(), a.kind)).or_default().push(a.announce_date);
        }
        let mut matched = Vec::new();
        let mut unmatched = 0usize;
        for t in &predicted {
            let qi = quarters.binary_search(&t.quarter_end).expect("panel quarter");
            let lo = qi.checked_sub(1).map(|q| quarters[q]);
            let hit = by_key.get(&(t.id.ticker.as_str(), t.kind)).and_then(|dates| {
                dates.iter().copied().filter(|&d| d <= t.quarter_end && lo.is_none_or(|lo| d > lo)).min()
            });
            match hit {
                Some(date) => matched.push(Announcement { ticker: t.id.ticker.clone(), kind: t.kind, announce_date: date }),
                None => unmatched += 1,
            }
        }
        let stubs = build_positions(&matched);
        let mut trades: Vec<TradeRecord> = Vec::new();
        let mut portfolios: Vec<PortfolioReport> = Vec::new();
        for h in HORIZONS {
            let (t, p) = backtest(&stubs, &ev.prices, h);
            trades.extend(t);
            portfolios.push(p);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["ticker", "side", "entry_date", "horizon", "trade_return_pct"]).map_err(data_err)?;
        for t in &trades {
            let side = match t.side {
                event_alpha::Side::Long => "long",
                event_alpha::Side::Short => "short",
            };
            w.write_record([t.ticker.as_str(), side, &t.entry_date.to_string(), &t.horizon.to_string(), &t.trade_return_pct.to_string()])
                .map_err(data_err)?;
        }
        let buf = w.into_inner().map_err(data_err)?;
        self.writer.bytes("trades.csv", &buf)?;
        #[derive(Serialize)]
        struct BacktestReport<'a> {
            signal_model: &'a str,
            convention: &'static str,
            predicted_transitions: usize,
            actual_transitions_in_test: usize,
            matched_to_announcements: usize,
            unmatched_predictions: usize,
            portfolios: &'a [PortfolioReport],
        }
        let report = BacktestReport {
            signal_model: &selected,
            convention: "long predicted additions, short predicted removals, entered at the matching announcement close; equal weights; no costs",
            predicted_transitions: predicted.len(),
            actual_transitions_in_test: actual,
            matched_to_announcements: matched.len(),
            unmatched_predictions: unmatched,
            portfolios: &portfolios,
        };
        self.writer.json("backtest.json", "backtest", &report)?;
        Ok(())
    }
}

/// Loads (or defaults) the configuration, applies flag overrides and runs
/// `stage`.
pub fn run_stage(config_path: Option<&std::path::Path>, overrides: &Overrides, stage: Stage) -> Result<Manifest, PipelineError> {
    let cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Run::new(cfg.apply(overrides))?.execute(stage)
}
