//! Supervised training of the source model.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::adaptation::batch_ranges;
use crate::data::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::losses::labeled_cross_entropy;
use crate::network::{backward_full, estimate_bn_stats, forward_with_tape, BnMode, Network};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Zero returns the network unchanged.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains every parameter with softmax cross entropy, normalizing with batch
/// statistics, then sets the BN running statistics to those of the full
/// training set (layer by layer).
pub fn train_source(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::BatchTooSmall { n: data.len(), min: 2 });
    }
    if data.classes != net.classes() {
        return Err(Error::DimensionMismatch {
            what: "classes",
            expected: net.classes(),
            got: data.classes,
        });
    }
    let mut velocity = vec![0.0; net.param_count()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(data.len(), &mut seed::rng(cfg.seed, &format!("train-shuffle/{epoch}")));
        let mut total = 0.0;
        let mut count = 0usize;
        for range in batch_ranges(order.len(), cfg.batch_size) {
            let idx = &order[range];
            let x = data.features.select(Axis(0), idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (logits, tape) = forward_with_tape(net, &x, BnMode::TargetBatch)?;
            let loss = labeled_cross_entropy(&logits, &labels)?;
            let value = loss.value.ok_or(Error::Empty("training batch"))?;
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            total += value * idx.len() as f64;
            count += idx.len();
            let grad = backward_full(net, &tape, &loss.grad)?;
            let mut params = net.params();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.lr * *v;
            }
            net.set_params(&params)?;
        }
        epoch_losses.push(total / count as f64);
    }
    if cfg.epochs > 0 {
        estimate_bn_stats(net, &data.features, 1.0)?;
    }
    Ok(TrainReport { epoch_losses })
}
