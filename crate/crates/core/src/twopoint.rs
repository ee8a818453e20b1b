//! Two-point model of self-learning dynamics.
//!
//! A linear binary classifier `w` is trained by self-learning on two data
//! points `x_k`, `x_l`. Tracking only the projections `y_k = x_k . w` and
//! `y_l = x_l . w` reduces the dynamics to four ODEs with a stop-gradient
//! teacher (student and teacher components) or two without one. Both
//! systems have the trivial fixed point `y = 0`, where the classifier is
//! orthogonal to the data; whether it attracts decides whether training can
//! collapse.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic function without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sig(z: f64, tau: f64) -> f64 {
    sigmoid(z / tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    StopGradient,
    NoStopGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Integrator {
    GradientDescent,
    Momentum { momentum: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPointConfig {
    pub x_k: Vec<f64>,
    pub x_l: Vec<f64>,
    pub tau_s: f64,
    pub tau_t: f64,
    /// Teacher rate in `dy_t/dt = alpha (y_s - y_t)`.
    pub alpha: f64,
    /// Shared initial weights of student and teacher.
    pub w_init: Vec<f64>,
    pub integrator: Integrator,
    pub step_size: f64,
    pub steps: usize,
}

impl TwoPointConfig {
    /// Two orthonormal points `[1, 0]`, `[0, -1]`, init `[0.5, 0.5]`, step
    /// 0.1 with momentum 0.9 for 2000 steps. `alpha = 1 / step` makes each
    /// discrete teacher update copy the previous student.
    pub fn reference(tau_s: f64, tau_t: f64) -> Self {
        Self {
            x_k: vec![1.0, 0.0],
            x_l: vec![0.0, -1.0],
            tau_s,
            tau_t,
            alpha: 10.0,
            w_init: vec![0.5, 0.5],
            integrator: Integrator::Momentum { momentum: 0.9 },
            step_size: 0.1,
            steps: 2000,
        }
    }

    /// Same geometry without momentum.
    pub fn preset_plain(tau_s: f64, tau_t: f64, step_size: f64) -> Self {
        Self {
            integrator: Integrator::GradientDescent,
            step_size,
            alpha: 1.0 / step_size,
            ..Self::reference(tau_s, tau_t)
        }
    }

    /// Reference settings from the alternative start `[0.6, 0.3]`.
    pub fn preset_alt_init(tau_s: f64, tau_t: f64) -> Self {
        Self {
            w_init: vec![0.6, 0.3],
            ..Self::reference(tau_s, tau_t)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.x_k.len();
        if d == 0 || self.x_l.len() != d || self.w_init.len() != d {
            return Err(Error::config("x_k, x_l and w_init must share a nonzero dimension"));
        }
        if self.x_k.iter().all(|&v| v == 0.0) || self.x_l.iter().all(|&v| v == 0.0) {
            return Err(Error::config("data points must be nonzero"));
        }
        for (name, v) in [("tau_s", self.tau_s), ("tau_t", self.tau_t), ("alpha", self.alpha)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::config("step size must be non-negative"));
        }
        if let Integrator::Momentum { momentum } = self.integrator {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::config("momentum must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        Geometry {
            norm_k2: dot(&self.x_k, &self.x_k),
            norm_l2: dot(&self.x_l, &self.x_l),
            dot: dot(&self.x_k, &self.x_l),
        }
    }

    pub fn initial_state(&self, variant: Variant) -> TwoPointState {
        let dot = |a: &[f64]| a.iter().zip(&self.w_init).map(|(x, w)| x * w).sum::<f64>();
        let y = [dot(&self.x_k), dot(&self.x_l)];
        match variant {
            Variant::StopGradient => TwoPointState::StopGradient { student: y, teacher: y },
            Variant::NoStopGradient => TwoPointState::NoStopGradient { y },
        }
    }
}

/// Gram entries of the two data points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub norm_k2: f64,
    pub norm_l2: f64,
    pub dot: f64,
}

impl Geometry {
    /// Eigenvalues of the Gram matrix, larger first.
    pub fn gram_eigenvalues(&self) -> (f64, f64) {
        let half_trace = 0.5 * (self.norm_k2 + self.norm_l2);
        let r = 0.5 * ((self.norm_k2 - self.norm_l2).powi(2) + 4.0 * self.dot * self.dot).sqrt();
        (half_trace + r, half_trace - r)
    }

    /// `x_k = +-x_l` (singular Gram matrix).
    pub fn is_degenerate(&self) -> bool {
        let det = self.norm_k2 * self.norm_l2 - self.dot * self.dot;
        det.abs() <= 1e-12 * self.norm_k2 * self.norm_l2
    }
}

/// Projections of the weights onto the two data points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TwoPointState {
    /// `[y_k, y_l]` of student and teacher.
    StopGradient { student: [f64; 2], teacher: [f64; 2] },
    NoStopGradient { y: [f64; 2] },
}

impl TwoPointState {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            TwoPointState::StopGradient { student, teacher } => vec![student[0], student[1], teacher[0], teacher[1]],
            TwoPointState::NoStopGradient { y } => y.to_vec(),
        }
    }

    pub fn from_values(variant: Variant, v: &[f64]) -> Self {
        match variant {
            Variant::StopGradient => TwoPointState::StopGradient {
                student: [v[0], v[1]],
                teacher: [v[2], v[3]],
            },
            Variant::NoStopGradient => TwoPointState::NoStopGradient { y: [v[0], v[1]] },
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            TwoPointState::StopGradient { .. } => Variant::StopGradient,
            TwoPointState::NoStopGradient { .. } => Variant::NoStopGradient,
        }
    }

    /// Largest absolute component.
    pub fn amplitude(&self) -> f64 {
        self.values().into_iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// `sigma_t(y_t) sigma_s(-y_s) - sigma_t(-y_t) sigma_s(y_s)`
fn bracket(y_t: f64, y_s: f64, tau_t: f64, tau_s: f64) -> f64 {
    sig(y_t, tau_t) * sig(-y_s, tau_s) - sig(-y_t, tau_t) * sig(y_s, tau_s)
}

/// Time derivatives `[ys_k, ys_l, yt_k, yt_l]` with a stop-gradient teacher.
pub fn rhs_stop_grad(student: [f64; 2], teacher: [f64; 2], cfg: &TwoPointConfig) -> [f64; 4] {
    let g = cfg.geometry();
    let (ts, tt) = (cfg.tau_s, cfg.tau_t);
    let bk = bracket(teacher[0], student[0], tt, ts);
    let bl = bracket(teacher[1], student[1], tt, ts);
    [
        (g.norm_k2 * bk + g.dot * bl) / ts,
        (g.norm_l2 * bl + g.dot * bk) / ts,
        cfg.alpha * (student[0] - teacher[0]),
        cfg.alpha * (student[1] - teacher[1]),
    ]
}

/// Per-point drive without stop gradient: the stop-gradient bracket plus the
/// teacher-branch term `sigma_t(y) sigma_t(-y) y / (tau_s tau_t)`.
fn drive_no_stop_grad(y: f64, tau_s: f64, tau_t: f64) -> f64 {
    bracket(y, y, tau_t, tau_s) / tau_s + sig(y, tau_t) * sig(-y, tau_t) * y / (tau_s * tau_t)
}

/// Time derivatives `[y_k, y_l]` when teacher and student are the same
/// weights and both branches are differentiated.
pub fn rhs_no_stop_grad(y: [f64; 2], cfg: &TwoPointConfig) -> [f64; 2] {
    let g = cfg.geometry();
    let ck = drive_no_stop_grad(y[0], cfg.tau_s, cfg.tau_t);
    let cl = drive_no_stop_grad(y[1], cfg.tau_s, cfg.tau_t);
    [g.norm_k2 * ck + g.dot * cl, g.norm_l2 * cl + g.dot * ck]
}

pub fn rhs(state: &TwoPointState, cfg: &TwoPointConfig) -> Vec<f64> {
    match *state {
        TwoPointState::StopGradient { student, teacher } => rhs_stop_grad(student, teacher, cfg).to_vec(),
        TwoPointState::NoStopGradient { y } => rhs_no_stop_grad(y, cfg).to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// All eigenvalues negative: the trivial fixed point attracts and
    /// collapse is possible.
    FixedPointStable,
    /// Largest eigenvalue zero: linear analysis is inconclusive.
    Marginal,
    /// Some eigenvalue positive: no collapse onto the fixed point.
    Unstable,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::FixedPointStable => "stable",
            Verdict::Marginal => "marginal",
            Verdict::Unstable => "unstable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    /// Jacobian eigenvalues at the origin. Stop gradient:
    /// `[lambda_+, lambda_-, lambda~_+, lambda~_-]`; without: `[lambda_1, lambda_2]`.
    pub eigenvalues: Vec<f64>,
    /// `8 alpha tau_s^2 + B_{+,-}` (stop gradient only).
    pub a: Option<[f64; 2]>,
    /// `B_{+,-}`: twice the Gram eigenvalues.
    pub b: [f64; 2],
    pub verdict: Verdict,
}

fn verdict_from(eigenvalues: &[f64]) -> Verdict {
    let scale = eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let max = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * scale;
    if max > tol {
        Verdict::Unstable
    } else if max >= -tol {
        Verdict::Marginal
    } else {
        Verdict::FixedPointStable
    }
}

fn b_pair(g: &Geometry) -> [f64; 2] {
    let (gp, gm) = g.gram_eigenvalues();
    [2.0 * gp, 2.0 * gm]
}

/// Closed-form Jacobian eigenvalues at the origin, stop-gradient system.
///
/// The Jacobian decouples along the Gram eigenvectors into 2x2 blocks
/// `[[-g/(4 tau_s^2), g/(4 tau_s tau_t)], [alpha, -alpha]]`, giving
/// `lambda = (-A -+ sqrt(A^2 + 32 alpha tau_s^2 B (tau_s/tau_t - 1))) / (16 tau_s^2)`
/// with `B = 2g` and `A = 8 alpha tau_s^2 + B`. The `lambda~` pair is
/// positive exactly when `tau_s > tau_t`.
pub fn stability_stop_grad(cfg: &TwoPointConfig) -> Result<StabilityResult> {
    cfg.validate()?;
    let g = cfg.geometry();
    let b = b_pair(&g);
    let ts2 = cfg.tau_s * cfg.tau_s;
    let a = b.map(|bi| 8.0 * cfg.alpha * ts2 + bi);
    let ratio = cfg.tau_s / cfg.tau_t - 1.0;
    let mut lambda = [0.0; 2];
    let mut lambda_tilde = [0.0; 2];
    for i in 0..2 {
        let root = (a[i] * a[i] + 32.0 * cfg.alpha * ts2 * b[i] * ratio).sqrt();
        lambda[i] = -(a[i] + root) / (16.0 * ts2);
        lambda_tilde[i] = (root - a[i]) / (16.0 * ts2);
    }
    let eigenvalues = vec![lambda[0], lambda[1], lambda_tilde[0], lambda_tilde[1]];
    Ok(StabilityResult {
        verdict: verdict_from(&eigenvalues),
        eigenvalues,
        a: Some(a),
        b,
    })
}

/// Closed-form eigenvalues without stop gradient,
/// `(2/tau_t - 1/tau_s) / (8 tau_s) * B_{+,-}`.
///
/// For `x_k = +-x_l` one eigenvalue is zero and the verdict can at best be
/// [`Verdict::Marginal`].
pub fn stability_no_stop_grad(cfg: &TwoPointConfig) -> Result<StabilityResult> {
    cfg.validate()?;
    let g = cfg.geometry();
    let b = b_pair(&g);
    let factor = (2.0 / cfg.tau_t - 1.0 / cfg.tau_s) / (8.0 * cfg.tau_s);
    let mut eigenvalues = vec![factor * b[0], factor * b[1]];
    if g.is_degenerate() {
        eigenvalues[1] = 0.0;
    }
    Ok(StabilityResult {
        verdict: verdict_from(&eigenvalues),
        eigenvalues,
        a: None,
        b,
    })
}

pub fn stability(cfg: &TwoPointConfig, variant: Variant) -> Result<StabilityResult> {
    match variant {
        Variant::StopGradient => stability_stop_grad(cfg),
        Variant::NoStopGradient => stability_no_stop_grad(cfg),
    }
}

/// Discrete-time trajectory, initial state first (`steps + 1` states).
///
/// Student components follow `v <- m v + rhs; y <- y + eta v` (plain
/// descent when `m = 0`); the teacher follows its own rate with plain Euler
/// steps. All right-hand sides are evaluated at the previous state.
pub fn integrate(cfg: &TwoPointConfig, variant: Variant) -> Result<Vec<TwoPointState>> {
    cfg.validate()?;
    let momentum = match cfg.integrator {
        Integrator::GradientDescent => 0.0,
        Integrator::Momentum { momentum } => momentum,
    };
    let mut state = cfg.initial_state(variant);
    let mut velocity = [0.0; 2];
    let mut out = Vec::with_capacity(cfg.steps + 1);
    out.push(state);
    for _ in 0..cfg.steps {
        let d = rhs(&state, cfg);
        let mut v = state.values();
        for i in 0..2 {
            velocity[i] = momentum * velocity[i] + d[i];
            v[i] += cfg.step_size * velocity[i];
        }
        for i in 2..v.len() {
            v[i] += cfg.step_size * d[i];
        }
        state = TwoPointState::from_values(variant, &v);
        out.push(state);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseVerdict {
    Collapsed,
    NotCollapsed,
}

impl CollapseVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            CollapseVerdict::Collapsed => "collapsed",
            CollapseVerdict::NotCollapsed => "not_collapsed",
        }
    }
}

pub const DEFAULT_COLLAPSE_TOL: f64 = 1e-2;

/// Largest `|y|` over the final 10% of the trajectory (at least one state).
pub fn final_amplitude(trajectory: &[TwoPointState]) -> f64 {
    let window = (trajectory.len() / 10).max(1);
    trajectory[trajectory.len() - window..]
        .iter()
        .map(TwoPointState::amplitude)
        .fold(0.0, f64::max)
}

pub fn classify_collapse(trajectory: &[TwoPointState], tol: f64) -> Result<CollapseVerdict> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let amp = final_amplitude(trajectory);
    Ok(if amp < tol {
        CollapseVerdict::Collapsed
    } else {
        CollapseVerdict::NotCollapsed
    })
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub tau_s: f64,
    pub tau_t: f64,
    pub analytic: Verdict,
    pub simulated: CollapseVerdict,
    pub final_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub variant: Variant,
    pub tau_s: Vec<f64>,
    pub tau_t: Vec<f64>,
    /// Row-major over `(tau_t, tau_s)`.
    pub cells: Vec<PhaseCell>,
}

impl PhaseDiagram {
    /// Cells that simulate as collapsed although the analysis says the fixed
    /// point is not attracting.
    pub fn containment_violations(&self) -> Vec<&PhaseCell> {
        self.cells
            .iter()
            .filter(|c| c.simulated == CollapseVerdict::Collapsed && c.analytic != Verdict::FixedPointStable)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau_s,tau_t,analytic_verdict,simulated_verdict,final_amplitude\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{:?},{:?},{},{},{:?}\n",
                c.tau_s,
                c.tau_t,
                c.analytic.as_str(),
                c.simulated.as_str(),
                c.final_amplitude
            ));
        }
        out
    }

    /// Plain (P2) greyscale image: one pixel per cell, `tau_s` left to right,
    /// `tau_t` bottom to top. Collapsed 0, stable-but-not-collapsed 128,
    /// marginal 192, unstable 255.
    pub fn to_pgm(&self) -> String {
        let (w, h) = (self.tau_s.len(), self.tau_t.len());
        let mut out = format!("P2\n{w} {h}\n255\n");
        for row in (0..h).rev() {
            let line: Vec<String> = (0..w)
                .map(|col| {
                    let c = &self.cells[row * w + col];
                    let v = match (c.simulated, c.analytic) {
                        (CollapseVerdict::Collapsed, _) => 0,
                        (_, Verdict::FixedPointStable) => 128,
                        (_, Verdict::Marginal) => 192,
                        (_, Verdict::Unstable) => 255,
                    };
                    v.to_string()
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Analytic and simulated verdicts on every `(tau_s, tau_t)` pair. Cells are
/// independent and run in parallel; the result order is fixed.
pub fn phase_diagram(
    tau_s: &[f64],
    tau_t: &[f64],
    template: &TwoPointConfig,
    variant: Variant,
    tol: f64,
) -> Result<PhaseDiagram> {
    if tau_s.is_empty() || tau_t.is_empty() {
        return Err(Error::Empty("phase grid"));
    }
    template.validate()?;
    let pairs: Vec<(f64, f64)> = tau_t.iter().flat_map(|&tt| tau_s.iter().map(move |&ts| (ts, tt))).collect();
    let cells = pairs
        .par_iter()
        .map(|&(ts, tt)| {
            let cfg = TwoPointConfig {
                tau_s: ts,
                tau_t: tt,
                ..template.clone()
            };
            let analytic = stability(&cfg, variant)?.verdict;
            let traj = integrate(&cfg, variant)?;
            let amp = final_amplitude(&traj);
            Ok(PhaseCell {
                tau_s: ts,
                tau_t: tt,
                analytic,
                simulated: classify_collapse(&traj, tol)?,
                final_amplitude: amp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseDiagram {
        variant,
        tau_s: tau_s.to_vec(),
        tau_t: tau_t.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn geometry_cfg(tau_s: f64, tau_t: f64) -> TwoPointConfig {
        TwoPointConfig {
            alpha: 1.0,
            ..TwoPointConfig::reference(tau_s, tau_t)
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1e4), 1.0);
        assert_eq!(sigmoid(-1e4), 0.0);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(sig(1e3, 1e-3), 1.0);
    }

    #[test]
    fn origin_is_a_fixed_point() {
        let cfg = geometry_cfg(0.7, 0.3);
        assert_eq!(rhs_stop_grad([0.0; 2], [0.0; 2], &cfg), [0.0; 4]);
        assert_eq!(rhs_no_stop_grad([0.0; 2], &cfg), [0.0; 2]);
        let equal = geometry_cfg(0.5, 0.5);
        assert_eq!(rhs_stop_grad([0.0; 2], [0.0; 2], &equal), [0.0; 4]);
    }

    #[test]
    fn equal_temperatures_freeze_student_on_the_diagonal() {
        let cfg = geometry_cfg(0.8, 0.8);
        let d = rhs_stop_grad([0.3, -1.1], [0.3, -1.1], &cfg);
        assert_abs_diff_eq!(d[0], 0.0, epsilon = 1e-16);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-16);
        // teacher moves towards the student
        let d = rhs_stop_grad([0.5, 0.0], [0.2, 0.0], &cfg);
        assert_abs_diff_eq!(d[2], cfg.alpha * 0.3, epsilon = 1e-15);
        assert_eq!(d[3], 0.0);
    }

    #[test]
    fn hot_teacher_suppresses_extra_term() {
        let mut cfg = geometry_cfg(0.7, 1e9);
        cfg.x_l = vec![0.4, -1.0];
        let y = [0.3, -0.2];
        let no_sg = rhs_no_stop_grad(y, &cfg);
        let sg = rhs_stop_grad(y, y, &cfg);
        assert_abs_diff_eq!(no_sg[0], sg[0], epsilon = 1e-9);
        assert_abs_diff_eq!(no_sg[1], sg[1], epsilon = 1e-9);
    }

    #[test]
    fn integrate_edge_cases() {
        let mut cfg = geometry_cfg(1.0, 0.5);
        cfg.step_size = 0.0;
        cfg.steps = 50;
        let traj = integrate(&cfg, Variant::StopGradient).unwrap();
        assert_eq!(traj.len(), 51);
        assert!(traj.iter().all(|s| *s == traj[0]));
        cfg.steps = 0;
        assert_eq!(integrate(&cfg, Variant::NoStopGradient).unwrap().len(), 1);
    }

    #[test]
    fn collapse_classification() {
        let zeros = vec![TwoPointState::NoStopGradient { y: [0.0, 0.0] }; 30];
        assert_eq!(classify_collapse(&zeros, 1e-2).unwrap(), CollapseVerdict::Collapsed);
        let ones = vec![TwoPointState::NoStopGradient { y: [1.0, 1.0] }; 30];
        assert_eq!(classify_collapse(&ones, 1e-2).unwrap(), CollapseVerdict::NotCollapsed);
        assert!(classify_collapse(&[], 1e-2).is_err());
        // only the final 10% counts
        let mut decaying = ones.clone();
        decaying.extend(vec![TwoPointState::NoStopGradient { y: [1e-4, 0.0] }; 10]);
        assert_eq!(classify_collapse(&decaying, 1e-2).unwrap(), CollapseVerdict::Collapsed);
    }

    #[test]
    fn equal_temperatures_are_marginal_with_stop_gradient() {
        let r = stability_stop_grad(&geometry_cfg(0.6, 0.6)).unwrap();
        assert_abs_diff_eq!(r.eigenvalues[2], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.eigenvalues[3], 0.0, epsilon = 1e-15);
        assert!(r.eigenvalues[0] < 0.0 && r.eigenvalues[1] < 0.0);
        assert_eq!(r.verdict, Verdict::Marginal);
    }

    #[test]
    fn no_stop_grad_examples() {
        let r = stability_no_stop_grad(&geometry_cfg(1.0, 1.0)).unwrap();
        // (1/8)(2 - 1)(|x_k|^2 + |x_l|^2 +- 0)
        assert_abs_diff_eq!(r.eigenvalues[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r.eigenvalues[1], 0.25, epsilon = 1e-15);
        assert_eq!(r.verdict, Verdict::Unstable);

        let r = stability_no_stop_grad(&geometry_cfg(0.4, 1.0)).unwrap();
        assert!(r.eigenvalues.iter().all(|&l| l < 0.0));
        assert_eq!(r.verdict, Verdict::FixedPointStable);

        let mut degenerate = geometry_cfg(0.4, 1.0);
        degenerate.x_l = degenerate.x_k.clone();
        let r = stability_no_stop_grad(&degenerate).unwrap();
        assert_eq!(r.eigenvalues[1], 0.0);
        assert_eq!(r.verdict, Verdict::Marginal);
        degenerate.x_l = vec![-1.0, 0.0];
        assert_eq!(stability_no_stop_grad(&degenerate).unwrap().verdict, Verdict::Marginal);
    }

    #[test]
    fn log_space_endpoints() {
        let v = log_space(1e-3, 10.0, 5);
        assert_eq!(v.len(), 5);
        assert_abs_diff_eq!(v[0], 1e-3);
        assert_eq!(v[4], 10.0);
        assert_abs_diff_eq!(v[2], 0.1, epsilon = 1e-15);
        assert_eq!(log_space(2.0, 3.0, 1), vec![2.0]);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = geometry_cfg(1.0, 1.0);
        cfg.x_k = vec![0.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = geometry_cfg(-1.0, 1.0);
        assert!(stability_stop_grad(&cfg).is_err());
        cfg.tau_s = 1.0;
        cfg.integrator = Integrator::Momentum { momentum: 1.0 };
        assert!(integrate(&cfg, Variant::StopGradient).is_err());
    }

    #[test]
    fn csv_and_pgm_shapes() {
        let taus = log_space(0.1, 1.0, 2);
        let mut cfg = TwoPointConfig::reference(1.0, 1.0);
        cfg.steps = 20;
        let pd = phase_diagram(&taus, &taus, &cfg, Variant::StopGradient, DEFAULT_COLLAPSE_TOL).unwrap();
        assert_eq!(pd.to_csv().lines().count(), 5);
        let pgm = pd.to_pgm();
        assert!(pgm.starts_with("P2\n2 2\n255\n"));
        assert_eq!(pgm.lines().count(), 5);
    }
}
