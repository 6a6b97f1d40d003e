//! Run configuration: a JSON document whose omitted keys take defaults,
//! overridable by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::evaluation::HyperGrid;
use crate::event_alpha::EventSynthConfig;
use crate::learners::{LogisticSettings, SvcSettings};
use crate::panel_store::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { n_train: 35, n_val: 5, n_test: 2 }
    }
}

/// Forest hyperparameters for the `train` stage; the seed is the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSection {
    pub n_estimators: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None` means floor(sqrt(p)).
    pub features_per_split: Option<usize>,
}

impl Default for ForestSection {
    fn default() -> Self {
        ForestSection { n_estimators: 200, max_depth: None, min_samples_split: 2, features_per_split: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Panel CSV; exclusive with `synth`.
    pub panel_path: Option<PathBuf>,
    /// Synthetic panel settings; exclusive with `panel_path`.
    pub synth: Option<SynthConfig>,
    pub announcements_path: Option<PathBuf>,
    pub prices_path: Option<PathBuf>,
    /// Used for synthetic announcements and prices when no event files are
    /// given and the panel is synthetic.
    pub event_synth: EventSynthConfig,
    pub split: SplitSizes,
    pub grid: HyperGrid,
    pub cv_folds: usize,
    pub seed: u64,
    pub exclude_tickers: Vec<String>,
    pub out_dir: PathBuf,
    pub prune_threshold: f64,
    /// Largest firms by market cap kept per quarter; `None` keeps all.
    pub top_k: Option<usize>,
    pub forest: ForestSection,
    pub logistic: LogisticSettings,
    pub svc: SvcSettings,
    /// Test rows explained in the attribution summary.
    pub explain_rows: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            panel_path: None,
            synth: Some(SynthConfig::default()),
            announcements_path: None,
            prices_path: None,
            event_synth: EventSynthConfig::default(),
            split: SplitSizes::default(),
            grid: HyperGrid::default(),
            cv_folds: 5,
            seed: 42,
            exclude_tickers: vec!["IR".into(), "AIV".into()],
            out_dir: PathBuf::from("out"),
            prune_threshold: 0.7,
            top_k: Some(800),
            forest: ForestSection::default(),
            logistic: LogisticSettings::default(),
            svc: SvcSettings::default(),
            explain_rows: 40,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, PipelineError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))?;
        // an explicit panel path replaces the default synthetic block unless both are written out
        let raw: serde_json::Value = serde_json::from_str(text).expect("parsed above");
        let mut cfg = cfg;
        if cfg.panel_path.is_some() && raw.get("synth").is_none() {
            cfg.synth = None;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn apply(mut self, o: &Overrides) -> RunConfig {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        match (&self.panel_path, &self.synth) {
            (Some(_), Some(_)) => return bad("set exactly one of panel_path and synth, not both"),
            (None, None) => return bad("set exactly one of panel_path and synth"),
            (None, Some(s)) => s.validate().map_err(|e| PipelineError::Config(format!("synth: {e}")))?,
            _ => {}
        }
        if self.announcements_path.is_some() != self.prices_path.is_some() {
            return bad("announcements_path and prices_path go together");
        }
        self.event_synth
            .validate()
            .map_err(|e| PipelineError::Config(format!("event_synth: {e}")))?;
        let s = self.split;
        if s.n_train == 0 || s.n_val == 0 || s.n_test == 0 {
            return bad("split sizes must be positive");
        }
        if self.cv_folds == 0 {
            return bad("cv_folds must be >= 1");
        }
        self.grid.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return bad("prune_threshold must lie in (0, 1)");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be >= 1");
        }
        if self.forest.n_estimators == 0 || self.forest.min_samples_split < 2 || self.forest.max_depth == Some(0) {
            return bad("forest: n_estimators >= 1, min_samples_split >= 2, max_depth >= 1");
        }
        if self.forest.features_per_split == Some(0) {
            return bad("forest: features_per_split must be >= 1");
        }
        if self.explain_rows == 0 {
            return bad("explain_rows must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration with `out_dir` blanked, so
    /// the same run written to two places hashes alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn panel_path_replaces_default_synth() {
        let c = RunConfig::from_json(r#"{"panel_path": "p.csv"}"#).unwrap();
        assert!(c.synth.is_none());
        c.validate().unwrap();
        let both = RunConfig::from_json(r#"{"panel_path": "p.csv", "synth": {}}"#).unwrap();
        assert!(matches!(both.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"synth": {"n_firm": 3}}"#).is_err());
    }

    #[test]
    fn flags_override_and_hash() {
        let c = RunConfig::from_json(r#"{"seed": 5}"#).unwrap();
        assert_eq!(c.seed, 5);
        let o = c.clone().apply(&Overrides { seed: Some(9), out_dir: Some("x".into()) });
        assert_eq!((o.seed, o.out_dir.to_str()), (9, Some("x")));
        assert_ne!(o.hash(), c.hash());
        let moved = RunConfig { out_dir: "elsewhere".into(), ..c.clone() };
        assert_eq!(moved.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn invalid_values() {
        for doc in [
            r#"{"split": {"n_train": 0, "n_val": 1, "n_test": 1}}"#,
            r#"{"prune_threshold": 1.5}"#,
            r#"{"grid": {"n_estimators": [], "max_depth": [null], "min_samples_split": [2]}}"#,
            r#"{"announcements_path": "a.csv"}"#,
            r#"{"synth": {"churn_rate": 2.0}}"#,
        ] {
            let c = RunConfig::from_json(doc).unwrap();
            assert!(c.validate().is_err(), "{doc}");
        }
    }
}
