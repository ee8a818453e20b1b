use nalgebra::DMatrix;
use proptest::prelude::*;
use selflearn::twopoint::{
    classify_collapse, final_amplitude, integrate, log_space, phase_diagram, rhs, rhs_no_stop_grad, rhs_stop_grad, stability,
    CollapseVerdict, TwoPointConfig, TwoPointState, Variant, Verdict, DEFAULT_COLLAPSE_TOL,
};

fn plain_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross entropy of a student logit against a teacher logit, both
/// through tempered sigmoids.
fn point_loss(y_t: f64, y_s: f64, tau_t: f64, tau_s: f64) -> f64 {
    let (pt, qt) = (plain_sigmoid(y_t / tau_t), plain_sigmoid(-y_t / tau_t));
    -(pt * plain_sigmoid(y_s / tau_s).ln() + qt * plain_sigmoid(-y_s / tau_s).ln())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-grad_w L` by central differences, where `L` sums the loss over both
/// points; `teacher` of `None` ties the teacher to the differentiated weights.
fn weight_flow(cfg: &TwoPointConfig, w_s: &[f64], w_t: Option<&[f64]>) -> Vec<f64> {
    let loss = |w: &[f64]| {
        let wt = w_t.unwrap_or(w);
        [&cfg.x_k, &cfg.x_l]
            .iter()
            .map(|x| point_loss(dot(x, wt), dot(x, w), cfg.tau_t, cfg.tau_s))
            .sum::<f64>()
    };
    let h = 1e-6;
    (0..w_s.len())
        .map(|i| {
            let mut up = w_s.to_vec();
            let mut down = w_s.to_vec();
            up[i] += h;
            down[i] -= h;
            -(loss(&up) - loss(&down)) / (2.0 * h)
        })
        .collect()
}

fn pinned_cfg() -> TwoPointConfig {
    TwoPointConfig {
        x_k: vec![1.0, 0.0],
        x_l: vec![0.0, -1.0],
        tau_s: 1.0,
        tau_t: 0.5,
        alpha: 1.0,
        ..TwoPointConfig::reference(1.0, 0.5)
    }
}

/// Weights whose projections on `[1, 0]` and `[0, -1]` are `y`.
fn weights_for(y: [f64; 2]) -> Vec<f64> {
    vec![y[0], -y[1]]
}

#[test]
fn stop_grad_rhs_matches_loss_gradient_at_pinned_state() {
    let cfg = pinned_cfg();
    let (student, teacher) = ([0.3, -0.2], [0.1, 0.4]);
    let ws = weights_for(student);
    let wt = weights_for(teacher);
    let flow = weight_flow(&cfg, &ws, Some(&wt));
    let expected = [
        dot(&cfg.x_k, &flow),
        dot(&cfg.x_l, &flow),
        cfg.alpha * (student[0] - teacher[0]),
        cfg.alpha * (student[1] - teacher[1]),
    ];
    let got = rhs_stop_grad(student, teacher, &cfg);
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-8, "{got:?} vs {expected:?}");
    }
}

#[test]
fn no_stop_grad_rhs_matches_loss_gradient_at_pinned_state() {
    let cfg = pinned_cfg();
    let y = [0.3, -0.2];
    let flow = weight_flow(&cfg, &weights_for(y), None);
    let expected = [dot(&cfg.x_k, &flow), dot(&cfg.x_l, &flow)];
    let got = rhs_no_stop_grad(y, &cfg);
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-8, "{got:?} vs {expected:?}");
    }
}

/// Eigenvalues of a central-difference Jacobian of the rhs at the origin,
/// sorted ascending.
fn numerical_eigenvalues(cfg: &TwoPointConfig, variant: Variant) -> Vec<f64> {
    let n = match variant {
        Variant::StopGradient => 4,
        Variant::NoStopGradient => 2,
    };
    let h = 1e-6 * cfg.tau_s.min(cfg.tau_t);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut up = vec![0.0; n];
        let mut down = vec![0.0; n];
        up[j] = h;
        down[j] = -h;
        let fu = rhs(&TwoPointState::from_values(variant, &up), cfg);
        let fd = rhs(&TwoPointState::from_values(variant, &down), cfg);
        for i in 0..n {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    let eig = jac.complex_eigenvalues();
    let mut re: Vec<f64> = eig
        .iter()
        .map(|c| {
            assert!(c.im.abs() < 1e-9 * (1.0 + c.re.abs()), "complex eigenvalue {c}");
            c.re
        })
        .collect();
    re.sort_by(f64::total_cmp);
    re
}

fn random_cfg() -> impl Strategy<Value = TwoPointConfig> {
    (
        prop::array::uniform3(-2.0f64..2.0),
        prop::array::uniform3(-2.0f64..2.0),
        -1.5f64..1.0,
        -1.5f64..1.0,
        -1.0f64..1.5,
    )
        .prop_filter("points must be well separated from zero and each other", |(k, l, ..)| {
            let nk = dot(k, k);
            let nl = dot(l, l);
            let kl = dot(k, l);
            nk > 0.05 && nl > 0.05 && nk * nl - kl * kl > 0.01 * nk * nl
        })
        .prop_map(|(k, l, ls, lt, la)| TwoPointConfig {
            x_k: k.to_vec(),
            x_l: l.to_vec(),
            tau_s: 10f64.powf(ls),
            tau_t: 10f64.powf(lt),
            alpha: 10f64.powf(la),
            w_init: vec![0.0; 3],
            ..TwoPointConfig::reference(1.0, 1.0)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closed_form_eigenvalues_match_numerical_jacobian(cfg in random_cfg()) {
        for variant in [Variant::StopGradient, Variant::NoStopGradient] {
            let mut closed = stability(&cfg, variant).unwrap().eigenvalues;
            closed.sort_by(f64::total_cmp);
            let numeric = numerical_eigenvalues(&cfg, variant);
            let scale = closed.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (c, n) in closed.iter().zip(&numeric) {
                prop_assert!((c - n).abs() <= 1e-6 * scale, "{variant:?}: {closed:?} vs {numeric:?}");
            }
        }
    }

    #[test]
    fn verdict_depends_only_on_temperature_ratio(cfg in random_cfg()) {
        let stop = stability(&cfg, Variant::StopGradient).unwrap().verdict;
        let expected = if cfg.tau_s > cfg.tau_t { Verdict::Unstable } else { Verdict::FixedPointStable };
        prop_assert_eq!(stop, expected);
        let free = stability(&cfg, Variant::NoStopGradient).unwrap().verdict;
        let expected = if cfg.tau_s > cfg.tau_t / 2.0 { Verdict::Unstable } else { Verdict::FixedPointStable };
        prop_assert_eq!(free, expected);
    }

    #[test]
    fn matched_temperatures_freeze_student_on_teacher(
        y in prop::array::uniform2(-3.0f64..3.0),
        tau in 0.01f64..10.0,
    ) {
        let cfg = TwoPointConfig::reference(tau, tau);
        let d = rhs_stop_grad(y, y, &cfg);
        prop_assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12, "{d:?}");
    }
}

#[test]
fn closed_form_reference_example() {
    let cfg = pinned_cfg();
    let res = stability(&cfg, Variant::StopGradient).unwrap();
    // B_- = 2 for orthonormal points, A_- = 8 + 2; the lambda~ pair sits at
    // (-10 + sqrt(100 + 64)) / 16
    let expected = (-10.0 + 164f64.sqrt()) / 16.0;
    assert!((res.eigenvalues[3] - expected).abs() < 1e-12, "{:?}", res.eigenvalues);
    assert_eq!(res.verdict, Verdict::Unstable);
}

fn verdict_grid(variant: Variant, tau_s: &[f64], tau_t: &[f64]) -> Vec<Vec<Verdict>> {
    let template = TwoPointConfig {
        steps: 10,
        ..TwoPointConfig::reference(1.0, 1.0)
    };
    let pd = phase_diagram(tau_s, tau_t, &template, variant, DEFAULT_COLLAPSE_TOL).unwrap();
    pd.cells.chunks(tau_s.len()).map(|row| row.iter().map(|c| c.analytic).collect()).collect()
}

#[test]
fn stop_grad_verdict_flips_across_the_diagonal() {
    let taus = [0.5, 1.0, 2.0];
    let grid = verdict_grid(Variant::StopGradient, &taus, &taus);
    for (r, row) in grid.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let expected = match c.cmp(&r) {
                std::cmp::Ordering::Greater => Verdict::Unstable,
                std::cmp::Ordering::Equal => Verdict::Marginal,
                std::cmp::Ordering::Less => Verdict::FixedPointStable,
            };
            assert_eq!(*v, expected, "tau_s {} tau_t {}", taus[c], taus[r]);
        }
    }
}

#[test]
fn no_stop_grad_verdict_flips_across_half_diagonal() {
    let tau_t = [1.0, 2.0, 4.0];
    let tau_s = [0.25, 0.5, 1.0];
    let grid = verdict_grid(Variant::NoStopGradient, &tau_s, &tau_t);
    for (r, row) in grid.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let (ts, tt) = (tau_s[c], tau_t[r]);
            let expected = if ts > tt / 2.0 {
                Verdict::Unstable
            } else if ts == tt / 2.0 {
                Verdict::Marginal
            } else {
                Verdict::FixedPointStable
            };
            assert_eq!(*v, expected, "tau_s {ts} tau_t {tt}");
        }
    }
}

#[test]
fn unstable_reference_run_stays_away_from_zero() {
    let cfg = pinned_cfg();
    let cfg = TwoPointConfig {
        alpha: 10.0,
        ..cfg
    };
    let traj = integrate(&cfg, Variant::StopGradient).unwrap();
    let TwoPointState::StopGradient { student, .. } = *traj.last().unwrap() else {
        unreachable!()
    };
    assert!(student[0].abs() >= 0.1 && student[1].abs() >= 0.1, "{student:?}");
    assert_eq!(classify_collapse(&traj, DEFAULT_COLLAPSE_TOL).unwrap(), CollapseVerdict::NotCollapsed);
}

#[test]
fn deep_collapse_reference_run_reaches_zero() {
    let cfg = TwoPointConfig::reference(1.0, 10.0);
    let traj = integrate(&cfg, Variant::StopGradient).unwrap();
    let TwoPointState::StopGradient { student, .. } = *traj.last().unwrap() else {
        unreachable!()
    };
    assert!(student[0].abs().max(student[1].abs()) < 1e-3, "{student:?}");
    assert_eq!(classify_collapse(&traj, DEFAULT_COLLAPSE_TOL).unwrap(), CollapseVerdict::Collapsed);
}

#[test]
fn desk_scale_diagrams_respect_containment() {
    let taus = log_space(1e-3, 10.0, 16);
    let template = TwoPointConfig::reference(1.0, 1.0);
    for variant in [Variant::StopGradient, Variant::NoStopGradient] {
        let pd = phase_diagram(&taus, &taus, &template, variant, DEFAULT_COLLAPSE_TOL).unwrap();
        assert!(pd.containment_violations().is_empty(), "{variant:?}");
        assert!(pd.cells.iter().any(|c| c.simulated == CollapseVerdict::Collapsed), "{variant:?}");
        for c in &pd.cells {
            assert!(c.final_amplitude.is_finite());
        }
        let traj = integrate(
            &TwoPointConfig {
                tau_s: pd.cells[0].tau_s,
                tau_t: pd.cells[0].tau_t,
                ..template.clone()
            },
            variant,
        )
        .unwrap();
        assert_eq!(final_amplitude(&traj), pd.cells[0].final_amplitude);
    }
}
