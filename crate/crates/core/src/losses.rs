//! Self-learning objectives.
//!
//! Per-sample losses take raw logits and work in log-space (max-subtracted
//! log-softmax) throughout. [`batch_loss`] reduces a batch to the mean over
//! admitted samples and returns the adjoint w.r.t. the student logits.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePair {
    pub student: f64,
    pub teacher: f64,
}

impl TemperaturePair {
    pub fn new(student: f64, teacher: f64) -> Result<Self> {
        let pair = Self { student, teacher };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("student", self.student), ("teacher", self.teacher)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config(format!("{name} temperature must be positive and finite, got {t}")));
            }
        }
        Ok(())
    }
}

impl Default for TemperaturePair {
    fn default() -> Self {
        Self { student: 1.0, teacher: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Cross entropy against the teacher's argmax.
    HardPl { threshold: f64 },
    /// Cross entropy against the teacher's full distribution.
    SoftPl,
    /// Entropy of the student's own prediction.
    Entropy,
    /// Generalized cross entropy against the teacher's argmax.
    Rpl { q: f64, threshold: f64 },
    /// Teacher/student cross entropy with its own temperatures. Without stop
    /// gradient the teacher branch is the student itself and is
    /// differentiated too.
    Unified { temps: TemperaturePair, stop_gradient: bool },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        let check_threshold = |t: f64| {
            if (0.0..=1.0).contains(&t) {
                Ok(())
            } else {
                Err(Error::config(format!("threshold must lie in [0, 1], got {t}")))
            }
        };
        match *self {
            LossKind::HardPl { threshold } => check_threshold(threshold),
            LossKind::Rpl { q, threshold } => {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(Error::config(format!("GCE q must lie in (0, 1], got {q}")));
                }
                check_threshold(threshold)
            }
            LossKind::Unified { temps, .. } => temps.validate(),
            LossKind::SoftPl | LossKind::Entropy => Ok(()),
        }
    }

    /// Whether the loss reads teacher logits at all.
    pub fn needs_teacher(&self) -> bool {
        match self {
            LossKind::Entropy => false,
            LossKind::Unified { stop_gradient, .. } => *stop_gradient,
            _ => true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::HardPl { .. } => "hardpl",
            LossKind::SoftPl => "softpl",
            LossKind::Entropy => "ent",
            LossKind::Rpl { .. } => "rpl",
            LossKind::Unified { .. } => "unified",
        }
    }
}

fn check_logits(logits: &[f64], tau: f64) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

fn log_softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| (z - max) / tau).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

pub fn log_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_logits(logits, tau)?;
    Ok(log_softmax_unchecked(logits, tau))
}

pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(log_softmax(logits, tau)?.into_iter().map(f64::exp).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_pair(teacher: &[f64], student: &[f64]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::DimensionMismatch {
            what: "teacher/student classes",
            expected: student.len(),
            got: teacher.len(),
        });
    }
    Ok(())
}

pub fn entropy_loss(student: &[f64], tau_s: f64) -> Result<f64> {
    let logp = log_softmax(student, tau_s)?;
    Ok(-logp.iter().map(|&l| l.exp() * l).sum::<f64>())
}

pub fn soft_pl_loss(teacher: &[f64], student: &[f64], tau_t: f64, tau_s: f64) -> Result<f64> {
    check_pair(teacher, student)?;
    let target = softmax(teacher, tau_t)?;
    let logp = log_softmax(student, tau_s)?;
    Ok(-target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>())
}

/// Teacher argmax and its confidence at unit temperature, or `None` when the
/// confidence is below `threshold`.
fn admitted_label(teacher: &[f64], threshold: f64) -> Result<Option<usize>> {
    let probs = softmax(teacher, 1.0)?;
    let label = argmax(&probs);
    Ok((probs[label] >= threshold).then_some(label))
}

/// `-log p_s(i)` for the teacher's argmax `i`; `None` marks a sample skipped
/// by the confidence threshold.
pub fn hard_pl_loss(teacher: &[f64], student: &[f64], threshold: f64, tau_s: f64) -> Result<Option<f64>> {
    check_pair(teacher, student)?;
    let Some(label) = admitted_label(teacher, threshold)? else {
        return Ok(None);
    };
    Ok(Some(-log_softmax(student, tau_s)?[label]))
}

/// `(1 - p_s(i)^q) / q` for the teacher's argmax `i`; `None` when skipped.
pub fn gce_loss(teacher: &[f64], student: &[f64], q: f64, threshold: f64, tau_s: f64) -> Result<Option<f64>> {
    check_pair(teacher, student)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("GCE q must lie in (0, 1], got {q}")));
    }
    let Some(label) = admitted_label(teacher, threshold)? else {
        return Ok(None);
    };
    let logp = log_softmax(student, tau_s)?[label];
    Ok(Some(gce_from_log_prob(logp, q)))
}

fn gce_from_log_prob(logp: f64, q: f64) -> f64 {
    if q == 1.0 {
        // MAE form, bit-identical to 1 - softmax
        return 1.0 - logp.exp();
    }
    // 1 - exp(q log p), written to keep precision as q -> 0
    -(q * logp).exp_m1() / q
}

/// `-sum_j softmax(teacher / tau_t)_j log softmax(student / tau_s)_j`.
pub fn unified_loss(teacher: &[f64], student: &[f64], temps: TemperaturePair) -> Result<f64> {
    temps.validate()?;
    soft_pl_loss(teacher, student, temps.teacher, temps.student)
}

/// Mean loss over the admitted samples of a batch and its adjoint.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// `None` when every sample was skipped.
    pub value: Option<f64>,
    pub admitted: Vec<bool>,
    /// `d value / d student logits`; when the teacher branch is the student
    /// itself (no stop gradient) its contribution is included.
    pub grad: Array2<f64>,
}

impl BatchLoss {
    pub fn admitted_count(&self) -> usize {
        self.admitted.iter().filter(|&&a| a).count()
    }
}

/// Per-sample value and gradient w.r.t. the student logits.
fn sample_loss(kind: &LossKind, teacher: &[f64], student: &[f64], temps: TemperaturePair) -> Result<Option<(f64, Vec<f64>)>> {
    let tau_s = match kind {
        LossKind::Unified { temps: own, .. } => own.student,
        _ => temps.student,
    };
    let logp = log_softmax(student, tau_s)?;
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    // cross entropy against a fixed target t: grad = (p - t) / tau_s
    let ce_grad = |target: &[f64]| -> Vec<f64> {
        p.iter().zip(target).map(|(pi, ti)| (pi - ti) / tau_s).collect()
    };
    let out = match *kind {
        LossKind::Entropy => {
            let h = -p.iter().zip(&logp).map(|(pi, li)| pi * li).sum::<f64>();
            let g = p.iter().zip(&logp).map(|(pi, li)| -pi * (li + h) / tau_s).collect();
            Some((h, g))
        }
        LossKind::SoftPl => {
            check_pair(teacher, student)?;
            let target = softmax(teacher, temps.teacher)?;
            let value = -target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
            Some((value, ce_grad(&target)))
        }
        LossKind::HardPl { threshold } => {
            check_pair(teacher, student)?;
            admitted_label(teacher, threshold)?.map(|label| {
                let mut onehot = vec![0.0; p.len()];
                onehot[label] = 1.0;
                (-logp[label], ce_grad(&onehot))
            })
        }
        LossKind::Rpl { q, threshold } => {
            check_pair(teacher, student)?;
            admitted_label(teacher, threshold)?.map(|label| {
                let pq = (q * logp[label]).exp();
                let g = p
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| {
                        let delta = if j == label { 1.0 } else { 0.0 };
                        -pq * (delta - pj) / tau_s
                    })
                    .collect();
                (gce_from_log_prob(logp[label], q), g)
            })
        }
        LossKind::Unified { temps: own, stop_gradient } => {
            let source = if stop_gradient { teacher } else { student };
            check_pair(source, student)?;
            let log_t = log_softmax(source, own.teacher)?;
            let target: Vec<f64> = log_t.iter().map(|l| l.exp()).collect();
            let value = -target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
            let mut g = ce_grad(&target);
            if !stop_gradient {
                // teacher branch: d/du_k = -t_k (log p_k + value) / tau_t
                for (gk, (tk, lk)) in g.iter_mut().zip(target.iter().zip(&logp)) {
                    *gk += -tk * (lk + value) / own.teacher;
                }
            }
            Some((value, g))
        }
    };
    Ok(out)
}

/// Evaluates `kind` on a batch. `teacher` is ignored by losses that do not
/// read a teacher (see [`LossKind::needs_teacher`]).
pub fn batch_loss(kind: &LossKind, teacher: &Array2<f64>, student: &Array2<f64>, temps: TemperaturePair) -> Result<BatchLoss> {
    kind.validate()?;
    temps.validate()?;
    if kind.needs_teacher() && teacher.dim() != student.dim() {
        return Err(Error::DimensionMismatch {
            what: "teacher logits rows",
            expected: student.nrows(),
            got: teacher.nrows(),
        });
    }
    let (n, k) = student.dim();
    let mut grad = Array2::zeros((n, k));
    let mut admitted = vec![false; n];
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let s = student.row(i).to_vec();
        let t = if kind.needs_teacher() { teacher.row(i).to_vec() } else { Vec::new() };
        if let Some((value, g)) = sample_loss(kind, &t, &s, temps)? {
            admitted[i] = true;
            total += value;
            count += 1;
            grad.row_mut(i).assign(&ndarray::Array1::from(g));
        }
    }
    if count == 0 {
        return Ok(BatchLoss { value: None, admitted, grad });
    }
    grad /= count as f64;
    Ok(BatchLoss {
        value: Some(total / count as f64),
        admitted,
        grad,
    })
}

/// Softmax cross entropy against given labels (supervised training).
pub fn labeled_cross_entropy(student: &Array2<f64>, labels: &[usize]) -> Result<BatchLoss> {
    let (n, k) = student.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Malformed(format!("label {y} out of range for {k} classes")));
        }
        let logp = log_softmax(&student.row(i).to_vec(), 1.0)?;
        total -= logp[y];
        for (j, l) in logp.iter().enumerate() {
            grad[(i, j)] = (l.exp() - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(BatchLoss {
        value: Some(total / n as f64),
        admitted: vec![true; n],
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // sigmoid(1) evaluated independently of softmax
    const SIG1: f64 = 0.731_058_578_630_004_9;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 10], 1.0).unwrap();
        assert!(p.iter().all(|&x| (x - 0.1).abs() < 1e-15));

        let a = softmax(&[2.0, 0.0], 2.0).unwrap();
        let b = softmax(&[1.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-15);
        assert_abs_diff_eq!(a[0], SIG1, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 1.0 - SIG1, epsilon = 1e-12);

        let cold = softmax(&[1.0, 0.0], 1e-6).unwrap();
        assert_abs_diff_eq!(cold[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(cold[1], 0.0, epsilon = 1e-9);

        assert!(softmax(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(entropy_loss(&[50.0, -50.0, 0.0], 1.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(entropy_loss(&[0.3; 7], 1.0).unwrap(), 7f64.ln(), epsilon = 1e-14);
        let p = SIG1;
        let oracle = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        assert_abs_diff_eq!(entropy_loss(&[1.0, 0.0], 1.0).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(oracle, 0.582203, epsilon = 5e-7);
    }

    #[test]
    fn soft_pl_examples() {
        let s = [0.2, -1.0, 0.7];
        assert_abs_diff_eq!(soft_pl_loss(&s, &s, 1.0, 1.0).unwrap(), entropy_loss(&s, 1.0).unwrap(), epsilon = 1e-15);

        let v = soft_pl_loss(&[1.0, 0.0], &[0.0, 1.0], 1.0, 1.0).unwrap();
        let oracle = SIG1 * -(1.0 - SIG1).ln() + (1.0 - SIG1) * -SIG1.ln();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 1.044320, epsilon = 5e-7);

        // one-hot teacher reduces to hard labels
        let hard = hard_pl_loss(&[1e4, 0.0, 0.0], &s, 0.0, 1.0).unwrap().unwrap();
        assert_abs_diff_eq!(soft_pl_loss(&[1e4, 0.0, 0.0], &s, 1.0, 1.0).unwrap(), hard, epsilon = 1e-12);
    }

    #[test]
    fn hard_pl_examples() {
        assert_eq!(hard_pl_loss(&[0.0; 10], &[0.0; 10], 0.9, 1.0).unwrap(), None);
        let v = hard_pl_loss(&[1.0, 0.0], &[1.0, 0.0], 0.0, 1.0).unwrap().unwrap();
        assert_abs_diff_eq!(v, -SIG1.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.31326, epsilon = 5e-6);
        // tie goes to class 0
        let tie = hard_pl_loss(&[2.0, 2.0, 0.0], &[0.0, 1.0, 0.0], 0.0, 1.0).unwrap().unwrap();
        assert_abs_diff_eq!(tie, -log_softmax(&[0.0, 1.0, 0.0], 1.0).unwrap()[0], epsilon = 1e-15);
    }

    #[test]
    fn gce_examples() {
        let v = gce_loss(&[1.0, 0.0], &[1.0, 0.0], 1.0, 0.0, 1.0).unwrap().unwrap();
        assert_abs_diff_eq!(v, 1.0 - SIG1, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.26894, epsilon = 5e-6);

        let v = gce_loss(&[1.0, 0.0], &[1.0, 0.0], 0.8, 0.0, 1.0).unwrap().unwrap();
        let oracle = (1.0 - SIG1.powf(0.8)) / 0.8;
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.27709, epsilon = 5e-6);

        assert!(gce_loss(&[1.0, 0.0], &[1.0, 0.0], 0.0, 0.0, 1.0).is_err());
        assert!(gce_loss(&[1.0, 0.0], &[1.0, 0.0], 1.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn unified_examples() {
        let t = [0.4, -0.3, 1.2];
        let s = [0.1, 0.9, -0.5];
        let unit = TemperaturePair::default();
        assert_abs_diff_eq!(unified_loss(&t, &s, unit).unwrap(), soft_pl_loss(&t, &s, 1.0, 1.0).unwrap(), epsilon = 1e-15);
        assert_abs_diff_eq!(unified_loss(&s, &s, unit).unwrap(), entropy_loss(&s, 1.0).unwrap(), epsilon = 1e-15);

        let cold_teacher = TemperaturePair::new(1.0, 1e-6).unwrap();
        let margin_teacher = [0.1, 0.0, -0.3];
        let u = unified_loss(&margin_teacher, &s, cold_teacher).unwrap();
        let h = hard_pl_loss(&margin_teacher, &s, 0.0, 1.0).unwrap().unwrap();
        assert_abs_diff_eq!(u, h, epsilon = 1e-6);
    }

    #[test]
    fn batch_skips_are_explicit() {
        let logits = Array2::zeros((3, 4));
        let bl = batch_loss(&LossKind::HardPl { threshold: 0.9 }, &logits, &logits, TemperaturePair::default()).unwrap();
        assert_eq!(bl.value, None);
        assert_eq!(bl.admitted_count(), 0);
        assert!(bl.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_mean_over_admitted() {
        let teacher = ndarray::array![[3.0, 0.0], [0.0, 0.0], [0.0, 4.0]];
        let student = ndarray::array![[0.5, 0.1], [0.2, 0.3], [-0.1, 0.4]];
        let bl = batch_loss(&LossKind::HardPl { threshold: 0.6 }, &teacher, &student, TemperaturePair::default()).unwrap();
        assert_eq!(bl.admitted, vec![true, false, true]);
        let a = hard_pl_loss(&[3.0, 0.0], &[0.5, 0.1], 0.6, 1.0).unwrap().unwrap();
        let b = hard_pl_loss(&[0.0, 4.0], &[-0.1, 0.4], 0.6, 1.0).unwrap().unwrap();
        assert_abs_diff_eq!(bl.value.unwrap(), 0.5 * (a + b), epsilon = 1e-15);
        assert_eq!(bl.grad.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_kinds_rejected() {
        assert!(LossKind::Rpl { q: 0.0, threshold: 0.0 }.validate().is_err());
        assert!(LossKind::HardPl { threshold: 1.2 }.validate().is_err());
        assert!(TemperaturePair::new(0.0, 1.0).is_err());
    }
}
