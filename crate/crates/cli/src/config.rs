//! Experiment configuration: one JSON document per run, overridable from
//! the command line, identified by the SHA-256 of its canonical form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use selflearn::adaptation::{AdaptConfig, SweepGrid, TeacherSchedule};
use selflearn::data::{Split, SuiteConfig};
use selflearn::losses::{LossKind, TemperaturePair};
use selflearn::metrics::DEFAULT_ECE_BINS;
use selflearn::network::{BnMode, PartitionMode};
use selflearn::training::TrainConfig;
use selflearn::twopoint::{TwoPointConfig, Variant, DEFAULT_COLLAPSE_TOL};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    TrainSource,
    Adapt,
    Sweep,
    Score,
    PhaseDiagram,
}

impl Verb {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verb::TrainSource => "train-source",
            Verb::Adapt => "adapt",
            Verb::Sweep => "sweep",
            Verb::Score => "score",
            Verb::PhaseDiagram => "phase-diagram",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Set from the command being run, so different commands on the same
    /// settings land in different run directories.
    pub command: Option<Verb>,
    /// Root of every random stream (suite, initialization, shuffling).
    pub seed: u64,
    pub suite: SuiteSection,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub sweep: SweepSection,
    pub score: ScoreSection,
    pub phase: PhaseSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: None,
            seed: 0,
            suite: SuiteSection::default(),
            train: TrainSection::default(),
            adapt: AdaptSection::default(),
            sweep: SweepSection::default(),
            score: ScoreSection::default(),
            phase: PhaseSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub target_per_class: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        let c = SuiteConfig::canonical(0);
        Self {
            classes: c.classes,
            dim: c.dim,
            train_per_class: c.train_per_class,
            val_per_class: c.val_per_class,
            target_per_class: c.target_per_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub loss: LossKind,
    pub partition: PartitionMode,
    pub bn: BnMode,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: TeacherSchedule,
    pub temps: TemperaturePair,
    /// Single ordered pass per dataset instead of shuffled epochs.
    pub online: bool,
    /// Source network file; when absent the source model is trained from
    /// the `train` section first.
    pub network: Option<PathBuf>,
    pub split: Split,
    pub ece_bins: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let a = AdaptConfig::new(LossKind::Entropy);
        Self {
            loss: a.loss,
            partition: a.partition,
            bn: a.bn,
            lr: a.lr,
            momentum: a.momentum,
            batch_size: a.batch_size,
            epochs: a.epochs,
            schedule: a.schedule,
            temps: a.temps,
            online: false,
            network: None,
            split: Split::Test,
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lrs: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lrs: vec![1e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0],
            losses: vec![LossKind::Entropy, LossKind::Rpl { q: 0.8, threshold: 0.0 }],
            epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    /// Error tables (`shift,severity,error`) to score.
    pub models: Vec<PathBuf>,
    /// Normalizer table; the shipped AlexNet ImageNet-C table when absent.
    pub normalizer: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    pub variants: Vec<Variant>,
    pub points: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Geometry, initialization and integrator; its temperatures are
    /// replaced per cell.
    pub template: TwoPointConfig,
    pub collapse_tol: f64,
    pub pgm: bool,
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self {
            variants: vec![Variant::StopGradient, Variant::NoStopGradient],
            points: 64,
            tau_min: 1e-3,
            tau_max: 10.0,
            template: TwoPointConfig::reference(1.0, 1.0),
            collapse_tol: DEFAULT_COLLAPSE_TOL,
            pgm: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file. Missing sections take their defaults; unknown
    /// keys and unknown schema versions are rejected.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            classes: self.suite.classes,
            dim: self.suite.dim,
            train_per_class: self.suite.train_per_class,
            val_per_class: self.suite.val_per_class,
            target_per_class: self.suite.target_per_class,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        let a = &self.adapt;
        AdaptConfig {
            loss: a.loss,
            partition: a.partition,
            bn: a.bn,
            lr: a.lr,
            momentum: a.momentum,
            batch_size: a.batch_size,
            epochs: a.epochs,
            schedule: a.schedule,
            seed: self.seed,
            temps: a.temps,
            log_steps: false,
            record_pseudo_labels: false,
        }
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        SweepGrid {
            lrs: self.sweep.lrs.clone(),
            losses: self.sweep.losses.clone(),
            epochs: self.sweep.epochs,
        }
    }

    /// Checks everything that can be checked without running: value
    /// ranges, the schema version and that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let s = &self.suite;
        if s.classes < 2 || s.dim < 2 || s.train_per_class == 0 || s.val_per_class == 0 || s.target_per_class == 0 {
            return Err(CliError::Config("suite needs at least 2 classes, 2 dimensions and 1 sample per class".into()));
        }
        self.train_config().validate()?;
        self.adapt_config().validate()?;
        if self.adapt.ece_bins == 0 {
            return Err(CliError::Config("ECE needs at least one bin".into()));
        }
        if let Some(p) = &self.adapt.network {
            require_file(p, "network")?;
        }
        let sw = &self.sweep;
        if sw.lrs.is_empty() || sw.losses.is_empty() || sw.epochs == 0 {
            return Err(CliError::Config("sweep needs learning rates, losses and a positive epoch budget".into()));
        }
        for loss in &sw.losses {
            loss.validate()?;
        }
        if sw.lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(CliError::Config("sweep learning rates must be non-negative".into()));
        }
        for p in &self.score.models {
            require_file(p, "model table")?;
        }
        if let Some(p) = &self.score.normalizer {
            require_file(p, "normalizer table")?;
        }
        let ph = &self.phase;
        if ph.variants.is_empty() || ph.points == 0 {
            return Err(CliError::Config("phase diagram needs a variant and at least one grid point".into()));
        }
        if !(ph.tau_min > 0.0 && ph.tau_max >= ph.tau_min && ph.tau_max.is_finite()) {
            return Err(CliError::Config("phase diagram temperatures must satisfy 0 < tau_min <= tau_max".into()));
        }
        if !(ph.collapse_tol > 0.0) {
            return Err(CliError::Config("collapse tolerance must be positive".into()));
        }
        ph.template.validate()?;
        Ok(())
    }

    /// Compact JSON with keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        // serde_json's map is ordered by key, so going through `Value`
        // sorts every object
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} file {} does not exist", path.display())))
    }
}

/// Hash recorded in a run directory's `config.json`, recomputed from its
/// content.
pub fn rehash_file(path: &Path) -> Result<String, CliError> {
    Ok(ExperimentConfig::load(path)?.hash())
}
