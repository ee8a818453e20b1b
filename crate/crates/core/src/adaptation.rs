//! Source-free test-time adaptation.
//!
//! A student network is updated on unlabeled target data with a
//! self-learning loss whose targets come from a teacher. The teacher is the
//! initial model ([`TeacherSchedule::None`]), a snapshot refreshed at epoch
//! boundaries ([`TeacherSchedule::PerEpoch`]) or the live student under stop
//! gradient ([`TeacherSchedule::Instant`]).

use std::collections::BTreeSet;
use std::ops::Range;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{shift_kinds, shuffled_indices, Dataset, Split, CLEAN};
use crate::error::{Error, Result};
use crate::losses::{argmax, batch_loss, softmax, LossKind, TemperaturePair};
use crate::metrics::{top1_error, ErrorGrid, PredictionSet};
use crate::network::{
    backward, estimate_bn_stats, forward, forward_with_tape, BnMode, Network, ParamPartition, PartitionMode,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSchedule {
    None,
    PerEpoch,
    Instant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub loss: LossKind,
    pub partition: PartitionMode,
    pub bn: BnMode,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: TeacherSchedule,
    pub seed: u64,
    /// Student/teacher temperatures for the pseudo-labeling losses. The
    /// unified loss carries its own pair.
    pub temps: TemperaturePair,
    #[serde(default)]
    pub log_steps: bool,
    #[serde(default)]
    pub record_pseudo_labels: bool,
}

impl AdaptConfig {
    /// Affine BN parameters, batch statistics, SGD with momentum 0.9,
    /// batch size 64, one epoch, instant teacher.
    pub fn new(loss: LossKind) -> Self {
        Self {
            loss,
            partition: PartitionMode::AffineBn,
            bn: BnMode::TargetBatch,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            epochs: 1,
            schedule: TeacherSchedule::Instant,
            seed: 0,
            temps: TemperaturePair::default(),
            log_steps: false,
            record_pseudo_labels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.bn.validate()?;
        self.temps.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::config("at least one epoch is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before adaptation.
    pub epoch: usize,
    /// Mean over steps of the batch loss; `None` before adaptation or when
    /// every step was skipped.
    pub loss: Option<f64>,
    pub target_error: f64,
    pub mean_entropy: f64,
    pub skipped_fraction: f64,
    pub source_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: Option<f64>,
    pub admitted: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: EpochRecord,
    /// One record per completed epoch.
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Per epoch, the pseudo-label (teacher argmax, or student argmax for
    /// losses without a teacher) of every target sample, by sample index.
    pub pseudo_labels: Vec<Vec<usize>>,
    pub outcome: Outcome,
}

impl Trajectory {
    /// Initial record followed by the epoch records.
    pub fn all_records(&self) -> impl Iterator<Item = &EpochRecord> {
        std::iter::once(&self.initial).chain(self.epochs.iter())
    }

    pub fn diverged(&self) -> bool {
        matches!(self.outcome, Outcome::Diverged { .. })
    }
}

/// Contiguous batches over `0..n`; a trailing remainder of a single sample
/// is folded into the previous batch.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    let size = batch_size.max(1);
    let mut out: Vec<Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = tail.end;
    }
    out
}

/// BN mode used outside training steps. Running statistics are read as they
/// are; the blend happens when they are committed during adaptation.
fn eval_mode(bn: BnMode) -> BnMode {
    match bn {
        BnMode::TargetRunning { .. } => BnMode::Source,
        other => other,
    }
}

/// Logits of every sample, computed over fixed-order batches.
pub fn predict_logits(net: &Network, features: &Array2<f64>, bn: BnMode, batch_size: usize) -> Result<Array2<f64>> {
    let mode = eval_mode(bn);
    if !mode.uses_batch_stats() {
        return forward(net, features, mode);
    }
    let mut out = Array2::zeros((features.nrows(), net.classes()));
    for r in batch_ranges(features.nrows(), batch_size) {
        let logits = forward(net, &features.slice(ndarray::s![r.clone(), ..]).to_owned(), mode)?;
        out.slice_mut(ndarray::s![r, ..]).assign(&logits);
    }
    Ok(out)
}

fn probabilities(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let mut probs = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let p = softmax(row.as_slice().expect("standard layout"), 1.0)?;
        probs.row_mut(i).assign(&ndarray::Array1::from(p));
    }
    Ok(probs)
}

/// Predictions on `data` at temperature 1 (see [`predict_logits`]).
pub fn evaluate(net: &Network, data: &Dataset, bn: BnMode, batch_size: usize) -> Result<PredictionSet> {
    let logits = predict_logits(net, &data.features, bn, batch_size)?;
    PredictionSet::new(probabilities(&logits)?, data.labels.clone())
}

pub fn mean_entropy(preds: &PredictionSet) -> f64 {
    let probs = preds.probs();
    let total: f64 = probs
        .outer_iter()
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .sum();
    total / probs.nrows() as f64
}

/// Source error after restoring BN statistics to the source data: the
/// running statistics are re-estimated on all of `source`, so only the
/// adapted parameters differ from the source model.
pub fn evaluate_source_retention(net: &Network, source: &Dataset) -> Result<f64> {
    let mut restored = net.clone();
    estimate_bn_stats(&mut restored, &source.features, 1.0)?;
    Ok(top1_error(&evaluate(&restored, source, BnMode::Source, source.len())?))
}

fn check_target(net: &Network, target: &Dataset, cfg: &AdaptConfig) -> Result<()> {
    if target.is_empty() {
        return Err(Error::Empty("target dataset"));
    }
    if target.dim() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "target features",
            expected: net.input_dim(),
            got: target.dim(),
        });
    }
    if cfg.bn.uses_batch_stats() && target.len() < 2 {
        return Err(Error::BatchTooSmall { n: target.len(), min: 2 });
    }
    Ok(())
}

fn epoch_record(
    net: &Network,
    target: &Dataset,
    cfg: &AdaptConfig,
    source: Option<&Dataset>,
    epoch: usize,
    loss: Option<f64>,
    skipped_fraction: f64,
) -> Result<EpochRecord> {
    let preds = evaluate(net, target, cfg.bn, cfg.batch_size)?;
    Ok(EpochRecord {
        epoch,
        loss,
        target_error: top1_error(&preds),
        mean_entropy: mean_entropy(&preds),
        skipped_fraction,
        source_error: source.map(|s| evaluate_source_retention(net, s)).transpose()?,
    })
}

enum Teacher<'a> {
    Fixed(&'a Array2<f64>),
    Snapshot(&'a Network),
    Live,
}

struct StepOutput {
    loss: Option<f64>,
    admitted: usize,
    labels: Vec<usize>,
    mean_max_prob: f64,
    predicted: BTreeSet<usize>,
}

/// One optimizer step on the rows `idx` of `features`. Non-finite values in
/// the forward pass or the loss are reported as `Err(NonFinite)`.
fn step(
    student: &mut Network,
    teacher: &Teacher,
    features: &Array2<f64>,
    idx: &[usize],
    cfg: &AdaptConfig,
    part: &ParamPartition,
    velocity: &mut [f64],
) -> Result<StepOutput> {
    let x = features.select(Axis(0), idx);
    let (logits, tape) = forward_with_tape(student, &x, cfg.bn)?;
    let teacher_logits = match teacher {
        Teacher::Fixed(all) => all.select(Axis(0), idx),
        Teacher::Snapshot(net) => forward(net, &x, cfg.bn)?,
        Teacher::Live => logits.clone(),
    };
    let bl = batch_loss(&cfg.loss, &teacher_logits, &logits, cfg.temps)?;
    if bl.value.is_some_and(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adaptation loss"));
    }
    let probs = probabilities(&logits)?;
    let mean_max_prob = probs.outer_iter().map(|r| r.fold(0.0f64, |a, &p| a.max(p))).sum::<f64>() / idx.len() as f64;
    let predicted = logits.outer_iter().map(|r| argmax(r.as_slice().expect("standard layout"))).collect();
    let label_source = if cfg.loss.needs_teacher() { &teacher_logits } else { &logits };
    let labels = label_source.outer_iter().map(|r| argmax(r.as_slice().expect("standard layout"))).collect();

    let delta = if bl.value.is_some() {
        let grad = backward(student, &tape, &bl.grad, part)?;
        velocity.iter_mut().zip(&grad).for_each(|(v, g)| *v = cfg.momentum * *v + g);
        Some(velocity.iter().map(|v| -cfg.lr * v).collect::<Vec<f64>>())
    } else {
        log::debug!("every sample of a batch was below threshold, step skipped");
        None
    };
    if matches!(cfg.bn, BnMode::TargetRunning { .. }) {
        student.commit_bn_stats(&tape)?;
    }
    if let Some(delta) = delta {
        student.apply_delta(part, &delta)?;
    }
    Ok(StepOutput {
        loss: bl.value,
        admitted: bl.admitted_count(),
        labels,
        mean_max_prob,
        predicted,
    })
}

fn non_finite_reason(err: &Error) -> Option<String> {
    match err {
        Error::NonFinite(what) => Some(format!("non-finite {what}")),
        _ => None,
    }
}

/// Adapts a copy of `net` to `target`. See [`adapt_tracking_source`].
pub fn adapt(net: &Network, target: &Dataset, cfg: &AdaptConfig) -> Result<(Network, Trajectory)> {
    adapt_tracking_source(net, target, cfg, None)
}

/// Adapts a copy of `net` to `target` for `cfg.epochs` epochs, also
/// recording the source error (with source BN statistics) when `source` is
/// given.
///
/// Each epoch visits the target data in an order drawn from the run seed and
/// the epoch number only, so a shorter run is a prefix of a longer one.
/// Divergence (non-finite loss, or an epoch in which every batch is
/// predicted as one class with confidence above `1 - 1e-12`) stops the run;
/// the network from before the offending step or epoch is returned.
pub fn adapt_tracking_source(
    net: &Network,
    target: &Dataset,
    cfg: &AdaptConfig,
    source: Option<&Dataset>,
) -> Result<(Network, Trajectory)> {
    cfg.validate()?;
    check_target(net, target, cfg)?;
    let part = ParamPartition::resolve(net, cfg.partition);
    let mut student = net.clone();
    let mut velocity = vec![0.0; part.len()];
    let fixed_teacher = match cfg.schedule {
        TeacherSchedule::None if cfg.loss.needs_teacher() => {
            Some(predict_logits(net, &target.features, cfg.bn, cfg.batch_size)?)
        }
        _ => None,
    };
    let mut traj = Trajectory {
        initial: epoch_record(&student, target, cfg, source, 0, None, 0.0)?,
        epochs: Vec::with_capacity(cfg.epochs),
        steps: Vec::new(),
        pseudo_labels: Vec::new(),
        outcome: Outcome::Ok,
    };
    for epoch in 1..=cfg.epochs {
        let epoch_start = student.clone();
        let snapshot = student.clone();
        let teacher = match (&fixed_teacher, cfg.schedule) {
            (Some(all), _) => Teacher::Fixed(all),
            (None, TeacherSchedule::PerEpoch) | (None, TeacherSchedule::None) => Teacher::Snapshot(&snapshot),
            (None, TeacherSchedule::Instant) => Teacher::Live,
        };
        let order = shuffled_indices(target.len(), &mut seed::rng(cfg.seed, &format!("shuffle/{epoch}")));
        let mut labels = vec![0usize; target.len()];
        let (mut loss_sum, mut loss_steps, mut admitted, mut seen) = (0.0, 0usize, 0usize, 0usize);
        let mut saturated = true;
        let mut classes = BTreeSet::new();
        let mut diverged = None;
        for (s, range) in batch_ranges(order.len(), cfg.batch_size).into_iter().enumerate() {
            let idx = &order[range];
            let before = student.clone();
            let out = match step(&mut student, &teacher, &target.features, idx, cfg, &part, &mut velocity) {
                Ok(out) => out,
                Err(e) => match non_finite_reason(&e) {
                    Some(reason) => {
                        student = before;
                        diverged = Some(reason);
                        break;
                    }
                    None => return Err(e),
                },
            };
            if let Some(v) = out.loss {
                loss_sum += v;
                loss_steps += 1;
            }
            admitted += out.admitted;
            seen += idx.len();
            saturated &= out.mean_max_prob > 1.0 - 1e-12;
            classes.extend(out.predicted);
            for (&i, l) in idx.iter().zip(out.labels) {
                labels[i] = l;
            }
            if cfg.log_steps {
                traj.steps.push(StepRecord {
                    epoch,
                    step: s,
                    loss: out.loss,
                    admitted: out.admitted,
                    batch: idx.len(),
                });
            }
        }
        if diverged.is_none() && saturated && classes.len() == 1 {
            student = epoch_start;
            diverged = Some("collapsed onto a single class".to_string());
        }
        if let Some(reason) = diverged {
            log::warn!("adaptation diverged in epoch {epoch}: {reason}");
            traj.outcome = Outcome::Diverged { epoch, reason };
            break;
        }
        let loss = (loss_steps > 0).then(|| loss_sum / loss_steps as f64);
        let skipped = 1.0 - admitted as f64 / seen as f64;
        traj.epochs.push(epoch_record(&student, target, cfg, source, epoch, loss, skipped)?);
        if cfg.record_pseudo_labels {
            traj.pseudo_labels.push(labels);
        }
    }
    Ok((student, traj))
}

/// Adapts a fresh copy of `net` to each dataset independently (in parallel;
/// results keep the input order).
pub fn adapt_each(net: &Network, sets: &[Dataset], cfg: &AdaptConfig) -> Result<Vec<(Network, Trajectory)>> {
    sets.par_iter().map(|ds| adapt(net, ds, cfg)).collect()
}

/// Error table keyed by each dataset's shift name and severity.
pub fn error_grid(sets: &[Dataset], errors: &[f64]) -> Result<ErrorGrid> {
    if sets.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            what: "errors per dataset",
            expected: sets.len(),
            got: errors.len(),
        });
    }
    ErrorGrid::from_entries(
        sets.iter()
            .zip(errors)
            .map(|(ds, &e)| (ds.tag.shift.clone(), u32::from(ds.tag.severity), e)),
    )
}

/// Top-1 error of `net` on each dataset without any parameter update.
pub fn static_errors(net: &Network, sets: &[Dataset], bn: BnMode, batch_size: usize) -> Result<Vec<f64>> {
    sets.iter()
        .map(|ds| evaluate(net, ds, bn, batch_size).map(|p| top1_error(&p)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRecord {
    pub batch: usize,
    /// Error on the batch before the update made from it.
    pub error: f64,
    pub loss: Option<f64>,
}

/// Single pass over `stream` in order, batch by batch: each batch is first
/// scored with the current model (BN statistics per `cfg.bn`) and then used
/// for one update. No shuffling; with the per-epoch schedule the teacher is
/// the initial model throughout.
pub fn adapt_online(net: &Network, stream: &Dataset, cfg: &AdaptConfig) -> Result<(Network, Vec<OnlineRecord>, Outcome)> {
    cfg.validate()?;
    check_target(net, stream, cfg)?;
    let part = ParamPartition::resolve(net, cfg.partition);
    let mut student = net.clone();
    let initial = net.clone();
    let teacher = match cfg.schedule {
        TeacherSchedule::Instant => Teacher::Live,
        _ => Teacher::Snapshot(&initial),
    };
    let mut velocity = vec![0.0; part.len()];
    let mut records = Vec::new();
    for (b, range) in batch_ranges(stream.len(), cfg.batch_size).into_iter().enumerate() {
        let idx: Vec<usize> = range.collect();
        let x = stream.features.select(Axis(0), &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| stream.labels[i]).collect();
        let logits = forward(&student, &x, eval_mode(cfg.bn))?;
        let error = top1_error(&PredictionSet::new(probabilities(&logits)?, labels)?);
        match step(&mut student, &teacher, &stream.features, &idx, cfg, &part, &mut velocity) {
            Ok(out) => records.push(OnlineRecord {
                batch: b,
                error,
                loss: out.loss,
            }),
            Err(e) => match non_finite_reason(&e) {
                Some(reason) => return Ok((student, records, Outcome::Diverged { epoch: 1, reason })),
                None => return Err(e),
            },
        }
    }
    Ok((student, records, Outcome::Ok))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lrs: Vec<f64>,
    pub losses: Vec<LossKind>,
    /// Epoch budget; the best epoch within it is selected per cell.
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub loss: LossKind,
    pub lr: f64,
    /// Mean dev error after each epoch `1..=len`; shorter than the budget if
    /// some dev set diverged.
    pub epoch_errors: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_error: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best_index: usize,
    /// `base` with the selected loss, learning rate and epoch count.
    pub best: AdaptConfig,
    /// Mean dev error before adaptation.
    pub baseline_error: f64,
}

/// Adapts to each dev set separately and averages the target error per
/// epoch. The list stops at the first epoch in which any run diverged.
pub fn mean_dev_errors(net: &Network, dev: &[Dataset], cfg: &AdaptConfig) -> Result<(f64, Vec<f64>, bool)> {
    if dev.is_empty() {
        return Err(Error::Empty("dev datasets"));
    }
    let mut initial = 0.0;
    let mut sums = vec![0.0; cfg.epochs];
    let mut usable = cfg.epochs;
    let mut diverged = false;
    for ds in dev {
        let (_, traj) = adapt(net, ds, cfg)?;
        initial += traj.initial.target_error;
        usable = usable.min(traj.epochs.len());
        diverged |= traj.diverged();
        for (sum, rec) in sums.iter_mut().zip(&traj.epochs) {
            *sum += rec.target_error;
        }
    }
    let n = dev.len() as f64;
    sums.truncate(usable);
    Ok((initial / n, sums.into_iter().map(|s| s / n).collect(), diverged))
}

/// Grid search over loss x learning rate on dev shifts only. Every cell is
/// run for the full epoch budget and scored at its best epoch; the cell
/// with the lowest such error wins, ties going to the earlier cell (losses
/// outer, learning rates inner).
pub fn sweep(net: &Network, dev: &[Dataset], grid: &SweepGrid, base: &AdaptConfig) -> Result<SweepResult> {
    if grid.lrs.is_empty() || grid.losses.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if grid.epochs == 0 {
        return Err(Error::config("sweep epoch budget must be positive"));
    }
    let test_shifts: Vec<&str> = shift_kinds(Split::Test).iter().map(|k| k.name()).collect();
    for ds in dev {
        if ds.tag.shift == CLEAN || test_shifts.contains(&ds.tag.shift.as_str()) {
            return Err(Error::config(format!(
                "sweep data must come from dev shifts, got {}",
                ds.tag
            )));
        }
    }
    let configs: Vec<AdaptConfig> = grid
        .losses
        .iter()
        .flat_map(|loss| {
            grid.lrs.iter().map(move |&lr| AdaptConfig {
                loss: *loss,
                lr,
                epochs: grid.epochs,
                ..base.clone()
            })
        })
        .collect();
    let runs = configs
        .par_iter()
        .map(|cfg| mean_dev_errors(net, dev, cfg))
        .collect::<Result<Vec<_>>>()?;
    let baseline_error = runs[0].0;
    let cells: Vec<SweepCell> = configs
        .iter()
        .zip(runs)
        .map(|(cfg, (_, errors, diverged))| {
            let best = errors
                .iter()
                .enumerate()
                .fold(None, |acc: Option<(usize, f64)>, (i, &e)| match acc {
                    Some((_, b)) if b <= e => acc,
                    _ => Some((i + 1, e)),
                });
            SweepCell {
                loss: cfg.loss,
                lr: cfg.lr,
                epoch_errors: errors,
                best_epoch: best.map(|b| b.0),
                best_error: best.map(|b| b.1),
                diverged,
            }
        })
        .collect();
    let best_index = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.best_error.map(|e| (i, e)))
        .fold(None, |acc: Option<(usize, f64)>, (i, e)| match acc {
            Some((_, b)) if b <= e => acc,
            _ => Some((i, e)),
        })
        .map(|b| b.0)
        .ok_or(Error::AllDiverged)?;
    let best = AdaptConfig {
        epochs: cells[best_index].best_epoch.expect("selected cell has an epoch"),
        ..configs[best_index].clone()
    };
    Ok(SweepResult {
        cells,
        best_index,
        best,
        baseline_error,
    })
}
