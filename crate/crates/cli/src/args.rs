//! Command-line parsing and flag overrides.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use selflearn::adaptation::TeacherSchedule;
use selflearn::data::Split;
use selflearn::losses::{LossKind, TemperaturePair};
use selflearn::network::{BnMode, PartitionMode};

use crate::config::{ExperimentConfig, Verb};
use crate::CliError;

/// Batch weight used when `--bn running` is given without a configured one.
pub const DEFAULT_RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(name = "selflearn", version, about = "Self-learning test-time adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model on the clean suite data.
    TrainSource(CommonArgs),
    /// Adapt the source model to every shifted dataset of a split.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Grid search over learning rates and losses on the dev shifts.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        adapt: AdaptArgs,
    },
    /// Baseline-normalized mean error of error tables.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// Error table to score (repeatable); replaces the configured list.
        #[arg(long = "table")]
        tables: Vec<PathBuf>,
        /// Normalizer table; defaults to the shipped AlexNet ImageNet-C errors.
        #[arg(long)]
        normalizer: Option<PathBuf>,
    },
    /// Two-point model stability and collapse map over temperatures.
    PhaseDiagram {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid points per temperature axis.
        #[arg(long)]
        points: Option<usize>,
        /// Restrict to one variant.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Only print errors.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ent,
    Rpl,
    Hardpl,
    Softpl,
    Unified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Affine,
    Last,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BnArg {
    Source,
    Batch,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    None,
    Epoch,
    Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    StopGrad,
    NoStopGrad,
}

#[derive(Debug, Default, Args)]
pub struct AdaptArgs {
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// GCE exponent for `--loss rpl`.
    #[arg(long)]
    pub q: Option<f64>,
    /// Teacher confidence threshold for hard labels.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub partition: Option<PartitionArg>,
    #[arg(long, value_enum)]
    pub bn: Option<BnArg>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// One ordered pass, scoring each batch before adapting on it.
    #[arg(long)]
    pub online: bool,
    #[arg(long = "tau-s")]
    pub tau_s: Option<f64>,
    #[arg(long = "tau-t")]
    pub tau_t: Option<f64>,
    /// Stop gradient through the teacher branch of the unified loss.
    #[arg(long = "stop-grad", num_args = 0..=1, default_missing_value = "true")]
    pub stop_grad: Option<bool>,
    /// Source network file (otherwise trained first).
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

impl Command {
    pub fn verb(&self) -> Verb {
        match self {
            Command::TrainSource(_) => Verb::TrainSource,
            Command::Adapt { .. } => Verb::Adapt,
            Command::Sweep { .. } => Verb::Sweep,
            Command::Score { .. } => Verb::Score,
            Command::PhaseDiagram { .. } => Verb::PhaseDiagram,
        }
    }

    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::TrainSource(c) => c,
            Command::Adapt { common, .. }
            | Command::Sweep { common, .. }
            | Command::Score { common, .. }
            | Command::PhaseDiagram { common, .. } => common,
        }
    }

    /// The config file (or defaults) with every given flag applied.
    pub fn resolve_config(&self) -> Result<ExperimentConfig, CliError> {
        let common = self.common();
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        match self {
            Command::TrainSource(_) => {}
            Command::Adapt { adapt, .. } => apply_adapt(&mut cfg, adapt, false)?,
            Command::Sweep { adapt, .. } => apply_adapt(&mut cfg, adapt, true)?,
            Command::Score { tables, normalizer, .. } => {
                if !tables.is_empty() {
                    cfg.score.models = tables.clone();
                }
                if let Some(n) = normalizer {
                    cfg.score.normalizer = Some(n.clone());
                }
            }
            Command::PhaseDiagram { points, variant, .. } => {
                if let Some(p) = points {
                    cfg.phase.points = *p;
                }
                if let Some(v) = variant {
                    cfg.phase.variants = vec![match v {
                        VariantArg::StopGrad => selflearn::twopoint::Variant::StopGradient,
                        VariantArg::NoStopGrad => selflearn::twopoint::Variant::NoStopGradient,
                    }];
                }
            }
        }
        Ok(cfg)
    }
}

fn loss_from_flags(base: LossKind, a: &AdaptArgs) -> Result<LossKind, CliError> {
    let mut kind = match a.loss {
        None => base,
        Some(LossArg::Ent) => LossKind::Entropy,
        Some(LossArg::Softpl) => LossKind::SoftPl,
        Some(LossArg::Hardpl) => match base {
            LossKind::HardPl { .. } => base,
            _ => LossKind::HardPl { threshold: 0.0 },
        },
        Some(LossArg::Rpl) => match base {
            LossKind::Rpl { .. } => base,
            _ => LossKind::Rpl { q: 0.8, threshold: 0.0 },
        },
        Some(LossArg::Unified) => match base {
            LossKind::Unified { .. } => base,
            _ => LossKind::Unified {
                temps: TemperaturePair::default(),
                stop_gradient: true,
            },
        },
    };
    let misuse = |flag: &str, kind: &LossKind| CliError::Config(format!("{flag} does not apply to loss {}", kind.name()));
    if let Some(q) = a.q {
        match &mut kind {
            LossKind::Rpl { q: slot, .. } => *slot = q,
            other => return Err(misuse("--q", other)),
        }
    }
    if let Some(t) = a.threshold {
        match &mut kind {
            LossKind::Rpl { threshold, .. } | LossKind::HardPl { threshold } => *threshold = t,
            other => return Err(misuse("--threshold", other)),
        }
    }
    if a.tau_s.is_some() || a.tau_t.is_some() || a.stop_grad.is_some() {
        match &mut kind {
            LossKind::Unified { temps, stop_gradient } => {
                if let Some(t) = a.tau_s {
                    temps.student = t;
                }
                if let Some(t) = a.tau_t {
                    temps.teacher = t;
                }
                if let Some(sg) = a.stop_grad {
                    *stop_gradient = sg;
                }
            }
            other => return Err(misuse("--tau-s/--tau-t/--stop-grad", other)),
        }
    }
    Ok(kind)
}

fn apply_adapt(cfg: &mut ExperimentConfig, a: &AdaptArgs, sweep: bool) -> Result<(), CliError> {
    let ad = &mut cfg.adapt;
    if sweep {
        // for a sweep, loss and learning-rate flags narrow the grid
        if a.loss.is_some() || a.q.is_some() || a.threshold.is_some() {
            let base = match a.loss {
                None => *cfg.sweep.losses.first().ok_or_else(|| CliError::Config("empty sweep loss list".into()))?,
                Some(_) => ad.loss,
            };
            cfg.sweep.losses = vec![loss_from_flags(base, a)?];
        }
        if let Some(lr) = a.lr {
            cfg.sweep.lrs = vec![lr];
        }
        if let Some(e) = a.epochs {
            cfg.sweep.epochs = e;
        }
    } else {
        ad.loss = loss_from_flags(ad.loss, a)?;
        if let Some(lr) = a.lr {
            ad.lr = lr;
        }
        if let Some(e) = a.epochs {
            ad.epochs = e;
        }
    }
    let ad = &mut cfg.adapt;
    if let Some(p) = a.partition {
        ad.partition = match p {
            PartitionArg::Affine => PartitionMode::AffineBn,
            PartitionArg::Last => PartitionMode::LastLayer,
            PartitionArg::Full => PartitionMode::Full,
        };
    }
    if let Some(b) = a.bn {
        ad.bn = match b {
            BnArg::Source => BnMode::Source,
            BnArg::Batch => BnMode::TargetBatch,
            BnArg::Running => match ad.bn {
                BnMode::TargetRunning { .. } => ad.bn,
                _ => BnMode::TargetRunning {
                    momentum: DEFAULT_RUNNING_MOMENTUM,
                },
            },
        };
    }
    if let Some(s) = a.schedule {
        ad.schedule = match s {
            ScheduleArg::None => TeacherSchedule::None,
            ScheduleArg::Epoch => TeacherSchedule::PerEpoch,
            ScheduleArg::Instant => TeacherSchedule::Instant,
        };
    }
    if a.online {
        ad.online = true;
    }
    if let Some(n) = &a.network {
        ad.network = Some(n.clone());
    }
    if let Some(s) = a.split {
        ad.split = match s {
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        };
    }
    Ok(())
}
