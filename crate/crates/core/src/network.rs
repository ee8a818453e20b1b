//! Small fully-connected classifier with batch normalization.
//!
//! Every hidden layer is `linear -> BN -> ReLU`; the final layer is a plain
//! linear map to class logits. Gradients are produced by recorded
//! reverse-mode accumulation over this closed architecture: [`forward_with_tape`]
//! stores what the backward sweep needs and [`backward`] replays it.
//!
//! Trainable parameters live in one flat vector (see [`Network::params`])
//! ordered per layer as `weight (row-major, out x in), bias, [gamma, beta]`.
//! BN running statistics are state, never parameters.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const REFERENCE_HIDDEN: usize = 64;

/// Per-sample class scores, `n x K`.
pub type LogitBatch = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            eps: BN_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn: Option<BatchNorm>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len() + self.bn.as_ref().map_or(0, |bn| 2 * bn.features())
    }
}

/// Which BN statistics `forward` normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BnMode {
    /// Running statistics stored in the network.
    Source,
    /// Statistics of the current batch.
    TargetBatch,
    /// Running statistics blended towards the current batch,
    /// `(1 - m) * running + m * batch`.
    TargetRunning { momentum: f64 },
}

impl BnMode {
    pub fn validate(&self) -> Result<()> {
        if let BnMode::TargetRunning { momentum } = *self {
            if !(momentum > 0.0 && momentum <= 1.0) {
                return Err(Error::config(format!(
                    "running BN momentum must lie in (0, 1], got {momentum}"
                )));
            }
        }
        Ok(())
    }

    /// Weight of the batch statistics in the normalizer.
    fn batch_weight(&self) -> f64 {
        match *self {
            BnMode::Source => 0.0,
            BnMode::TargetBatch => 1.0,
            BnMode::TargetRunning { momentum } => momentum,
        }
    }

    pub fn uses_batch_stats(&self) -> bool {
        !matches!(self, BnMode::Source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Every BN scale and shift.
    AffineBn,
    /// Weights and bias of the final linear layer.
    LastLayer,
    /// Every trainable parameter.
    Full,
}

/// A subset of the flat parameter vector exposed to an optimizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub mode: PartitionMode,
    indices: Vec<usize>,
}

impl ParamPartition {
    pub fn resolve(net: &Network, mode: PartitionMode) -> Self {
        let mut indices = Vec::new();
        let last = net.layers.len() - 1;
        for (li, layout) in net.layout().into_iter().enumerate() {
            match mode {
                PartitionMode::Full => indices.extend(layout.weight.start..layout.end()),
                PartitionMode::LastLayer if li == last => {
                    indices.extend(layout.weight.clone());
                    indices.extend(layout.bias.clone());
                }
                PartitionMode::LastLayer => {}
                PartitionMode::AffineBn => {
                    if let Some((gamma, beta)) = layout.affine {
                        indices.extend(gamma);
                        indices.extend(beta);
                    }
                }
            }
        }
        Self { mode, indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| full[i]).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    weight: Range<usize>,
    bias: Range<usize>,
    affine: Option<(Range<usize>, Range<usize>)>,
}

impl LayerLayout {
    fn end(&self) -> usize {
        self.affine.as_ref().map_or(self.bias.end, |(_, beta)| beta.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkFile", into = "NetworkFile")]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    what: "layer bias",
                    expected: layer.out_dim(),
                    got: layer.bias.len(),
                });
            }
            if i + 1 < layers.len() && layers[i + 1].in_dim() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    what: "layer chaining",
                    expected: layer.out_dim(),
                    got: layers[i + 1].in_dim(),
                });
            }
            if let Some(bn) = &layer.bn {
                for (what, len) in [
                    ("BN gamma", bn.gamma.len()),
                    ("BN beta", bn.beta.len()),
                    ("BN running mean", bn.running_mean.len()),
                    ("BN running variance", bn.running_var.len()),
                ] {
                    if len != layer.out_dim() {
                        return Err(Error::DimensionMismatch {
                            what,
                            expected: layer.out_dim(),
                            got: len,
                        });
                    }
                }
                if !(bn.eps > 0.0) {
                    return Err(Error::config("BN epsilon must be positive"));
                }
                if bn.running_var.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::config("BN running variance must be non-negative"));
                }
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized MLP with BN on every hidden layer.
    pub fn mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid layer dims {dims:?}")));
        }
        let n_layers = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                });
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    bn: (i + 1 < n_layers).then(|| BatchNorm::new(fan_out)),
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// `d -> 64 -> BN -> ReLU -> 64 -> BN -> ReLU -> K`.
    pub fn reference<R: Rng + ?Sized>(input_dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Self::mlp(&[input_dim, REFERENCE_HIDDEN, REFERENCE_HIDDEN, classes], rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn bn_features(&self) -> usize {
        self.layers.iter().filter_map(|l| l.bn.as_ref()).map(BatchNorm::features).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_len).sum()
    }

    fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|layer| {
                let weight = offset..offset + layer.weight.len();
                let bias = weight.end..weight.end + layer.bias.len();
                offset = bias.end;
                let affine = layer.bn.as_ref().map(|bn| {
                    let gamma = offset..offset + bn.features();
                    let beta = gamma.end..gamma.end + bn.features();
                    offset = beta.end;
                    (gamma, beta)
                });
                LayerLayout { weight, bias, affine }
            })
            .collect()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
            if let Some(bn) = &layer.bn {
                out.extend(bn.gamma.iter());
                out.extend(bn.beta.iter());
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
            if let Some(bn) = &mut layer.bn {
                bn.gamma.iter_mut().for_each(|g| *g = it.next().unwrap());
                bn.beta.iter_mut().for_each(|b| *b = it.next().unwrap());
            }
        }
        Ok(())
    }

    /// Adds `delta[k]` to the parameter at `part.indices()[k]`; every other
    /// parameter keeps its exact bits.
    pub fn apply_delta(&mut self, part: &ParamPartition, delta: &[f64]) -> Result<()> {
        if delta.len() != part.len() {
            return Err(Error::DimensionMismatch {
                what: "partition update",
                expected: part.len(),
                got: delta.len(),
            });
        }
        let mut params = self.params();
        for (&i, &d) in part.indices().iter().zip(delta) {
            params[i] += d;
        }
        self.set_params(&params)
    }

    /// Running `(mean, variance)` of every BN layer, in layer order.
    pub fn bn_stats(&self) -> Vec<(Array1<f64>, Array1<f64>)> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .map(|bn| (bn.running_mean.clone(), bn.running_var.clone()))
            .collect()
    }

    /// Writes the normalizer statistics recorded on `tape` into the running
    /// statistics. With `TargetRunning { m }` this is the exponential update
    /// `(1 - m) * running + m * batch`; with `TargetBatch` it replaces them.
    pub fn commit_bn_stats(&mut self, tape: &GradientTape) -> Result<()> {
        if tape.fingerprint != self.fingerprint() {
            return Err(Error::StaleTape);
        }
        for (layer, lt) in self.layers.iter_mut().zip(&tape.layers) {
            if let (Some(bn), Some(bt)) = (&mut layer.bn, &lt.bn) {
                bn.running_mean.assign(&bt.mean);
                bn.running_var.assign(&bt.var);
            }
        }
        Ok(())
    }

    /// Order-sensitive hash of every parameter and running statistic.
    pub fn fingerprint(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = FNV_OFFSET;
        let mut mix = |x: f64| {
            h ^= x.to_bits();
            h = h.wrapping_mul(FNV_PRIME);
        };
        for layer in &self.layers {
            layer.weight.iter().for_each(|&x| mix(x));
            layer.bias.iter().for_each(|&x| mix(x));
            if let Some(bn) = &layer.bn {
                for arr in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    arr.iter().for_each(|&x| mix(x));
                }
            }
        }
        h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

const NETWORK_FORMAT: &str = "selflearn-network";
const NETWORK_VERSION: u32 = 1;

/// On-disk layout. Floats are written in shortest round-trip form, so a
/// save/load cycle reproduces every bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkFile {
    format: String,
    version: u32,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerFile {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BatchNormFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchNormFile {
    eps: f64,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl From<Network> for NetworkFile {
    fn from(net: Network) -> Self {
        let layers = net
            .layers
            .into_iter()
            .map(|l| LayerFile {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                weight: l.weight.iter().copied().collect(),
                bias: l.bias.to_vec(),
                bn: l.bn.map(|bn| BatchNormFile {
                    eps: bn.eps,
                    gamma: bn.gamma.to_vec(),
                    beta: bn.beta.to_vec(),
                    running_mean: bn.running_mean.to_vec(),
                    running_var: bn.running_var.to_vec(),
                }),
            })
            .collect();
        NetworkFile {
            format: NETWORK_FORMAT.to_string(),
            version: NETWORK_VERSION,
            layers,
        }
    }
}

impl TryFrom<NetworkFile> for Network {
    type Error = Error;

    fn try_from(file: NetworkFile) -> Result<Self> {
        if file.format != NETWORK_FORMAT || file.version != NETWORK_VERSION {
            return Err(Error::Malformed(format!(
                "unsupported network file {} v{}",
                file.format, file.version
            )));
        }
        let layers = file
            .layers
            .into_iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.out_dim, l.in_dim), l.weight)
                    .map_err(|e| Error::Malformed(format!("weight shape: {e}")))?;
                Ok(Layer {
                    weight,
                    bias: Array1::from(l.bias),
                    bn: l.bn.map(|bn| BatchNorm {
                        running_mean: Array1::from(bn.running_mean),
                        running_var: Array1::from(bn.running_var),
                        gamma: Array1::from(bn.gamma),
                        beta: Array1::from(bn.beta),
                        eps: bn.eps,
                    }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers)
    }
}

#[derive(Debug, Clone)]
struct BnTape {
    /// Normalizer actually used (blended when running).
    mean: Array1<f64>,
    var: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_weight: f64,
    xhat: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Array2<f64>,
    pre: Array2<f64>,
    bn: Option<BnTape>,
    /// Output before the rectifier; `None` on the final layer.
    pre_relu: Option<Array2<f64>>,
}

/// Forward values recorded for one batch, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    fingerprint: u64,
    batch: usize,
    layers: Vec<LayerTape>,
}

impl GradientTape {
    pub fn batch_len(&self) -> usize {
        self.batch
    }

    /// `(mean, variance)` each BN layer normalized with.
    pub fn bn_normalizers(&self) -> Vec<(Array1<f64>, Array1<f64>)> {
        self.layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .map(|b| (b.mean.clone(), b.var.clone()))
            .collect()
    }
}

fn check_batch(net: &Network, batch: ArrayView2<f64>, bn: BnMode) -> Result<()> {
    bn.validate()?;
    if batch.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if batch.ncols() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "input features",
            expected: net.input_dim(),
            got: batch.ncols(),
        });
    }
    if bn.uses_batch_stats() && batch.nrows() < 2 {
        return Err(Error::BatchTooSmall { n: batch.nrows(), min: 2 });
    }
    if batch.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("input batch"));
    }
    Ok(())
}

pub fn forward(net: &Network, batch: &Array2<f64>, bn: BnMode) -> Result<LogitBatch> {
    forward_with_tape(net, batch, bn).map(|(logits, _)| logits)
}

pub fn forward_with_tape(net: &Network, batch: &Array2<f64>, bn: BnMode) -> Result<(LogitBatch, GradientTape)> {
    check_batch(net, batch.view(), bn)?;
    let n = batch.nrows();
    let last = net.layers.len() - 1;
    let mut x = batch.clone();
    let mut tapes = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        let mut pre = x.dot(&layer.weight.t());
        pre += &layer.bias;
        let (mut out, bn_tape) = match &layer.bn {
            Some(norm) => {
                let (y, tape) = batch_norm_forward(norm, &pre, bn.batch_weight());
                (y, Some(tape))
            }
            None => (pre.clone(), None),
        };
        let pre_relu = if li < last {
            let saved = out.clone();
            out.mapv_inplace(|v| v.max(0.0));
            Some(saved)
        } else {
            None
        };
        tapes.push(LayerTape {
            input: std::mem::replace(&mut x, out),
            pre,
            bn: bn_tape,
            pre_relu,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let tape = GradientTape {
        fingerprint: net.fingerprint(),
        batch: n,
        layers: tapes,
    };
    Ok((x, tape))
}

fn batch_norm_forward(bn: &BatchNorm, pre: &Array2<f64>, batch_weight: f64) -> (Array2<f64>, BnTape) {
    let n = pre.nrows() as f64;
    let (mean, var, batch_mean) = if batch_weight == 0.0 {
        (bn.running_mean.clone(), bn.running_var.clone(), bn.running_mean.clone())
    } else {
        let batch_mean = pre.sum_axis(Axis(0)) / n;
        let centered = pre - &batch_mean;
        let batch_var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        if batch_weight == 1.0 {
            (batch_mean.clone(), batch_var, batch_mean)
        } else {
            let keep = 1.0 - batch_weight;
            let mean = &bn.running_mean * keep + &batch_mean * batch_weight;
            let var = &bn.running_var * keep + &batch_var * batch_weight;
            (mean, var, batch_mean)
        }
    };
    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
    let xhat = (pre - &mean) * &inv_std;
    let y = &xhat * &bn.gamma + &bn.beta;
    (
        y,
        BnTape {
            mean,
            var,
            batch_mean,
            batch_weight,
            xhat,
        },
    )
}

/// Gradient of the loss w.r.t. every trainable parameter, in flat order.
///
/// `logits_grad` is the adjoint of the logits recorded on `tape`
/// (`d loss / d logits`, `n x K`).
pub fn backward_full(net: &Network, tape: &GradientTape, logits_grad: &Array2<f64>) -> Result<Vec<f64>> {
    if tape.fingerprint != net.fingerprint() || tape.layers.len() != net.layers.len() {
        return Err(Error::StaleTape);
    }
    if logits_grad.dim() != (tape.batch, net.classes()) {
        return Err(Error::StaleTape);
    }
    let layout = net.layout();
    let mut grad = vec![0.0; net.param_count()];
    let mut upstream = logits_grad.clone();
    for ((layer, lt), lay) in net.layers.iter().zip(&tape.layers).zip(&layout).rev() {
        if let Some(pre_relu) = &lt.pre_relu {
            upstream.zip_mut_with(pre_relu, |g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let dpre = match (&layer.bn, &lt.bn) {
            (Some(norm), Some(bt)) => {
                let (dpre, dgamma, dbeta) = batch_norm_backward(norm, bt, &lt.pre, &upstream);
                let (gamma_r, beta_r) = lay.affine.clone().expect("layout matches BN layer");
                grad[gamma_r].copy_from_slice(dgamma.as_slice().expect("contiguous"));
                grad[beta_r].copy_from_slice(dbeta.as_slice().expect("contiguous"));
                dpre
            }
            (None, None) => upstream,
            _ => return Err(Error::StaleTape),
        };
        let dweight = dpre.t().dot(&lt.input);
        let dbias = dpre.sum_axis(Axis(0));
        for (slot, v) in grad[lay.weight.clone()].iter_mut().zip(dweight.iter()) {
            *slot = *v;
        }
        grad[lay.bias.clone()].copy_from_slice(dbias.as_slice().expect("contiguous"));
        upstream = dpre.dot(&layer.weight);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(grad)
}

/// Gradient restricted to `part`, in partition order.
pub fn backward(
    net: &Network,
    tape: &GradientTape,
    logits_grad: &Array2<f64>,
    part: &ParamPartition,
) -> Result<Vec<f64>> {
    let full = backward_full(net, tape, logits_grad)?;
    Ok(part.gather(&full))
}

fn batch_norm_backward(
    bn: &BatchNorm,
    tape: &BnTape,
    pre: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = pre.nrows() as f64;
    let dgamma = (dy * &tape.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &bn.gamma;
    let inv_std = tape.var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
    let mut dpre = &dxhat * &inv_std;
    let m = tape.batch_weight;
    if m != 0.0 {
        // The normalizer depends on the batch through the batch mean and the
        // biased batch variance, each entering with weight m.
        let dmean = -(dxhat.sum_axis(Axis(0))) * &inv_std;
        let centered_used = pre - &tape.mean;
        let dvar = (&dxhat * &centered_used).sum_axis(Axis(0)) * inv_std.mapv(|s| -0.5 * s * s * s);
        let centered_batch = pre - &tape.batch_mean;
        dpre += &(&dmean * (m / n));
        dpre += &(&centered_batch * &(&dvar * (2.0 * m / n)));
    }
    (dpre, dgamma, dbeta)
}

/// Re-estimates BN running statistics from `batch`, layer by layer.
///
/// `momentum = 1` replaces the statistics with the batch statistics,
/// `momentum = 0` leaves them unchanged, values in between blend. Later
/// layers see activations normalized with the updated statistics of
/// earlier ones. Affine parameters are untouched.
pub fn estimate_bn_stats(net: &mut Network, batch: &Array2<f64>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config(format!("BN momentum must lie in [0, 1], got {momentum}")));
    }
    if batch.nrows() < 2 {
        return Err(Error::BatchTooSmall { n: batch.nrows(), min: 2 });
    }
    if momentum == 0.0 {
        check_batch(net, batch.view(), BnMode::TargetBatch)?;
        return Ok(());
    }
    let mode = if momentum == 1.0 {
        BnMode::TargetBatch
    } else {
        BnMode::TargetRunning { momentum }
    };
    let (_, tape) = forward_with_tape(net, batch, mode)?;
    net.commit_bn_stats(&tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net() -> Network {
        Network::from_layers(vec![Layer {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
            bn: None,
        }])
        .unwrap()
    }

    fn small_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::mlp(&[2, 3, 2], &mut rng).unwrap();
        // non-trivial affine and running stats
        let bn = net.layers[0].bn.as_mut().unwrap();
        bn.gamma = array![1.2, 0.7, -0.4];
        bn.beta = array![0.1, -0.3, 0.25];
        bn.running_mean = array![0.2, -0.1, 0.05];
        bn.running_var = array![1.5, 0.8, 2.0];
        net
    }

    #[test]
    fn identity_forward() {
        let logits = forward(&identity_net(), &array![[1.0, 0.0]], BnMode::Source).unwrap();
        assert_eq!(logits, array![[1.0, 0.0]]);
    }

    #[test]
    fn quadratic_loss_gradient_is_outer_product() {
        let net = identity_net();
        let x = array![[1.0, 0.0]];
        let (logits, tape) = forward_with_tape(&net, &x, BnMode::Source).unwrap();
        // loss = 0.5 |logits|^2, adjoint = logits
        let g = backward_full(&net, &tape, &logits).unwrap();
        let expected_w = logits.t().dot(&x);
        assert_eq!(&g[..4], expected_w.as_slice().unwrap());
        assert_eq!(&g[4..], logits.row(0).as_slice().unwrap());
    }

    #[test]
    fn constant_batch_outputs_beta() {
        let net = small_net(3);
        let batch = array![[0.4, -1.3], [0.4, -1.3], [0.4, -1.3]];
        let (_, tape) = forward_with_tape(&net, &batch, BnMode::TargetBatch).unwrap();
        let bt = tape.layers[0].bn.as_ref().unwrap();
        assert!(bt.var.iter().all(|&v| v == 0.0));
        assert!(bt.xhat.iter().all(|&v| v == 0.0));
        let pre_relu = tape.layers[0].pre_relu.as_ref().unwrap();
        for row in pre_relu.rows() {
            assert_eq!(row, net.layers[0].bn.as_ref().unwrap().beta);
        }
    }

    #[test]
    fn batch_mode_normalizes_to_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Network::reference(5, 3, &mut rng).unwrap();
        let batch = Array2::from_shape_fn((16, 5), |_| StandardNormal.sample(&mut rng));
        let (_, tape) = forward_with_tape(&net, &batch, BnMode::TargetBatch).unwrap();
        for lt in tape.layers.iter().filter_map(|l| l.bn.as_ref()) {
            let mean = lt.xhat.mean_axis(Axis(0)).unwrap();
            let var = lt.xhat.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
            for (&m, (&v, &raw)) in mean.iter().zip(var.iter().zip(lt.var.iter())) {
                assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
                // unit variance up to the epsilon in the denominator
                assert_abs_diff_eq!(v, raw / (raw + BN_EPS), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let net = small_net(1);
        assert!(matches!(
            forward(&net, &array![[1.0, 2.0]], BnMode::TargetBatch),
            Err(Error::BatchTooSmall { n: 1, min: 2 })
        ));
        assert!(forward(&net, &array![[1.0, 2.0]], BnMode::Source).is_ok());
        assert!(matches!(
            forward(&net, &array![[1.0, 2.0, 3.0]], BnMode::Source),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(forward(&net, &array![[1.0, 2.0], [0.0, 1.0]], BnMode::TargetRunning { momentum: 0.0 }).is_err());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = small_net(2);
        let batch = array![[0.1, 0.2], [0.3, -0.4]];
        let (logits, tape) = forward_with_tape(&net, &batch, BnMode::TargetBatch).unwrap();
        let mut p = net.params();
        p[0] += 1e-3;
        net.set_params(&p).unwrap();
        assert!(matches!(backward_full(&net, &tape, &logits), Err(Error::StaleTape)));
        let fresh = small_net(2);
        assert!(matches!(
            backward_full(&fresh, &tape, &Array2::zeros((3, 2))),
            Err(Error::StaleTape)
        ));
    }

    #[test]
    fn partitions_select_expected_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::reference(4, 3, &mut rng).unwrap();
        let affine = ParamPartition::resolve(&net, PartitionMode::AffineBn);
        assert_eq!(affine.len(), 2 * net.bn_features());
        assert_eq!(affine.len(), 2 * 2 * REFERENCE_HIDDEN);
        let last = ParamPartition::resolve(&net, PartitionMode::LastLayer);
        assert_eq!(last.len(), REFERENCE_HIDDEN * 3 + 3);
        assert_eq!(*last.indices().last().unwrap(), net.param_count() - 1);
        let full = ParamPartition::resolve(&net, PartitionMode::Full);
        assert_eq!(full.len(), net.param_count());
    }

    #[test]
    fn bn_stat_estimation_edge_cases() {
        let base = small_net(9);
        let batch = array![[0.5, 1.0], [0.5, 1.0]];

        let mut unchanged = base.clone();
        estimate_bn_stats(&mut unchanged, &batch, 0.0).unwrap();
        assert_eq!(unchanged, base);

        let mut replaced = base.clone();
        estimate_bn_stats(&mut replaced, &batch, 1.0).unwrap();
        let bn = replaced.layers[0].bn.as_ref().unwrap();
        let pre = base.layers[0].weight.dot(&array![0.5, 1.0]) + &base.layers[0].bias;
        assert_eq!(bn.running_mean, pre);
        assert!(bn.running_var.iter().all(|&v| v == 0.0));
        assert_eq!(bn.gamma, base.layers[0].bn.as_ref().unwrap().gamma);

        let mut too_small = base.clone();
        assert!(estimate_bn_stats(&mut too_small, &array![[0.5, 1.0]], 1.0).is_err());
    }

    #[test]
    fn blended_stats_sit_between_running_and_batch() {
        let base = small_net(4);
        let batch = array![[0.5, 1.0], [-0.2, 0.3], [1.1, -0.7]];
        let mut full = base.clone();
        estimate_bn_stats(&mut full, &batch, 1.0).unwrap();
        let mut half = base.clone();
        estimate_bn_stats(&mut half, &batch, 0.5).unwrap();
        let old = &base.layers[0].bn.as_ref().unwrap().running_mean;
        let new = &full.layers[0].bn.as_ref().unwrap().running_mean;
        let mid = &half.layers[0].bn.as_ref().unwrap().running_mean;
        for ((&o, &n), &m) in old.iter().zip(new).zip(mid) {
            assert_abs_diff_eq!(m, 0.5 * (o + n), epsilon = 1e-15);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Network::reference(3, 4, &mut rng).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&text).unwrap();
        assert_eq!(back.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   net.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.fingerprint(), net.fingerprint());
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let bad = Network::from_layers(vec![
            Layer { weight: Array2::zeros((3, 2)), bias: Array1::zeros(3), bn: None },
            Layer { weight: Array2::zeros((2, 4)), bias: Array1::zeros(2), bn: None },
        ]);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
    }
}
