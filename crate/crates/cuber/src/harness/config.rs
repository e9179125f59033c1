//! Experiment configuration: flat key-value files, validation, snapshots.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{LearnerConfig, LearnerError, Mode};
use crate::linalg::LinalgError;
use crate::memory::MemoryError;
use crate::network::{Loss, NetworkError};
use crate::regimes::CorrelationThresholds;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("bad data: {0}")]
    BadData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn default_generator() -> String {
    "overlap".into()
}
fn default_n_classes() -> usize {
    15
}
fn default_dim() -> usize {
    32
}
fn default_per_class() -> usize {
    200
}
fn default_separation() -> f64 {
    6.0
}
fn default_tasks() -> usize {
    5
}
fn default_ranges() -> Vec<(usize, usize)> {
    // five 6-class tasks over 15 classes; consecutive tasks share half
    // their classes
    vec![(0, 5), (3, 8), (6, 11), (9, 14), (12, 14)]
}
fn default_hidden() -> Vec<usize> {
    vec![100, 100]
}
fn default_lr() -> f64 {
    0.05
}
fn default_lambda() -> f64 {
    1.0
}
fn default_eps1() -> f64 {
    0.5
}
fn default_eps2() -> f64 {
    0.0
}
fn default_cap() -> usize {
    2
}
fn default_sparsity() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    10
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_modes() -> Vec<String> {
    vec!["cuber".into()]
}
fn default_n_samples() -> usize {
    125
}

/// Flat key-value experiment description. Every key has a default, so a
/// config file only needs the keys it wants to change.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// "overlap", "permuted", or "csv".
    #[serde(default = "default_generator")]
    pub generator: String,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Task count for the permuted generator.
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    /// Inclusive class ranges for the overlap generator.
    #[serde(default = "default_ranges")]
    pub ranges: Vec<(usize, usize)>,
    /// Path to a CSV dataset for the csv generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling_lr: Option<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_eps1")]
    pub eps1: f64,
    #[serde(default = "default_eps2")]
    pub eps2: f64,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Early stopping with learning-rate decay instead of a fixed epoch
    /// count.
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    /// Samples drawn per task for basis extraction.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Also run per-task scratch trainings and report forward transfer.
    #[serde(default)]
    pub fwt: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all keys have defaults")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        match self.generator.as_str() {
            "overlap" | "permuted" | "csv" => {}
            other => return Err(HarnessError::BadConfig(format!("unknown generator '{other}'"))),
        }
        if self.generator == "csv" && self.csv_path.is_none() {
            return Err(HarnessError::BadConfig("csv generator needs csv_path".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::BadConfig("need at least one seed".into()));
        }
        if self.modes.is_empty() {
            return Err(HarnessError::BadConfig("need at least one mode".into()));
        }
        for m in &self.modes {
            m.parse::<Mode>().map_err(HarnessError::BadConfig)?;
        }
        if self.hidden.is_empty() {
            return Err(HarnessError::BadConfig("need at least one hidden layer".into()));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(HarnessError::BadConfig("sparsity must be in [0, 1)".into()));
        }
        self.learner_config(Mode::Cuber, 0).validate()?;
        Ok(())
    }

    /// True when tasks have disjoint local label spaces and need separate
    /// heads.
    pub fn multi_head(&self) -> bool {
        self.generator == "overlap"
    }

    pub fn learner_config(&self, mode: Mode, seed: u64) -> LearnerConfig {
        LearnerConfig {
            mode,
            lr: self.lr,
            scaling_lr: self.scaling_lr,
            lambda: self.lambda,
            thresholds: CorrelationThresholds { eps1: self.eps1, eps2: self.eps2, cap: self.cap },
            batch_size: self.batch,
            max_epochs: self.epochs,
            early_stop: self.early_stop,
            snapshot_sparsity: self.sparsity,
            loss: Loss::CrossEntropy,
            seed,
            disable_degeneration: false,
        }
    }
}
