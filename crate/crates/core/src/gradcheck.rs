//! Central finite-difference checks of the analytic loss gradients.

use ndarray::Array2;

use crate::losses::{batch_loss, LossKind, TemperaturePair};
use crate::network::{backward, forward, forward_with_tape, BnMode, Network, ParamPartition, PartitionMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - fd| / max(|analytic|, |fd|, floor)` over the
    /// probed coordinates.
    pub max_rel_error: f64,
    pub probed: usize,
}

/// Compares the backpropagated gradient of `kind` on `x` with central
/// differences of step `h`, probing at most `max_probes` coordinates of the
/// partition (evenly strided). `teacher` is treated as a constant.
#[allow(clippy::too_many_arguments)]
pub fn check_loss_gradient(
    net: &Network,
    x: &Array2<f64>,
    teacher: &Array2<f64>,
    kind: &LossKind,
    temps: TemperaturePair,
    bn: BnMode,
    partition: PartitionMode,
    h: f64,
    max_probes: usize,
) -> Result<GradCheck> {
    if !(h > 0.0) || max_probes == 0 {
        return Err(Error::config("finite-difference step and probe count must be positive"));
    }
    let loss_at = |net: &Network| -> Result<f64> {
        let logits = forward(net, x, bn)?;
        batch_loss(kind, teacher, &logits, temps)?
            .value
            .ok_or_else(|| Error::config("every sample was skipped; nothing to differentiate"))
    };
    let part = ParamPartition::resolve(net, partition);
    let (logits, tape) = forward_with_tape(net, x, bn)?;
    let bl = batch_loss(kind, teacher, &logits, temps)?;
    let grad = backward(net, &tape, &bl.grad, &part)?;

    let base = net.params();
    let stride = part.len().div_ceil(max_probes).max(1);
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut probed = 0;
    for (pos, &idx) in part.indices().iter().enumerate().step_by(stride) {
        let mut p = base.clone();
        p[idx] = base[idx] + h;
        probe.set_params(&p)?;
        let up = loss_at(&probe)?;
        p[idx] = base[idx] - h;
        probe.set_params(&p)?;
        let down = loss_at(&probe)?;
        let fd = (up - down) / (2.0 * h);
        let rel = (grad[pos] - fd).abs() / grad[pos].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        probed += 1;
    }
    Ok(GradCheck {
        max_rel_error: worst,
        probed,
    })
}
