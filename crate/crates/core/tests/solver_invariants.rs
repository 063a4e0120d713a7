use noisy_sqp::{
    get_problem, reference_solution, solve, NoiseSpec, ProblemName, SolveReport, SolverConfig, Status,
};
use proptest::prelude::*;

fn noisy_run(name: ProblemName, eps: f64, seed: u64, relaxation: bool, iters: usize) -> SolveReport {
    let p = get_problem(name);
    let noise = NoiseSpec::new(eps, eps, seed).unwrap();
    let cfg = SolverConfig {
        relaxation_enabled: relaxation,
        max_iters: iters,
        stop_test: false,
        ..SolverConfig::default()
    }
    .with_estimates(noise.bounds(p.n(), p.m()));
    let x_star = reference_solution(name).unwrap().x_star;
    solve(&p, &noise, &cfg, Some(&x_star)).unwrap()
}

fn check_ledger(report: &SolveReport, cfg: &SolverConfig) {
    for w in report.trace.windows(2) {
        assert!(w[1].pi >= w[0].pi, "penalty decreased at k={}", w[1].k);
    }
    for r in &report.trace {
        assert!(r.model_value <= 1e-14 * (1.0 + r.merit_noisy.abs()), "model {} at k={}", r.model_value, r.k);
        if r.line_search_failed {
            assert_eq!(r.alpha, 0.0);
            assert!(r.merit_trial.is_nan());
            continue;
        }
        assert_eq!(r.alpha, cfg.alpha_init * 0.5f64.powi(r.backtracks as i32));
        let bound = r.merit_noisy + cfg.nu * r.alpha * r.model_value + r.eps_r;
        assert!(r.merit_trial <= bound, "sufficient decrease violated at k={}", r.k);
    }
}

#[test]
fn noisy_runs_keep_the_line_search_ledger() {
    for name in ProblemName::ALL {
        for (eps, relaxation) in [(1e-5, true), (1e-3, true), (1e-1, true), (1e-3, false)] {
            let report = noisy_run(name, eps, 3, relaxation, 300);
            let p = get_problem(name);
            let cfg = SolverConfig::default();
            check_ledger(&report, &cfg);
            if relaxation {
                let bounds = NoiseSpec::new(eps, eps, 3).unwrap().bounds(p.n(), p.m());
                for r in &report.trace {
                    let expected = 2.0 * (bounds.eps_f + r.pi * bounds.eps_c);
                    assert!((r.eps_r - expected).abs() <= 1e-12 * expected);
                }
            } else {
                assert!(report.trace.iter().all(|r| r.eps_r == 0.0));
            }
        }
    }
}

#[test]
fn evaluation_count_matches_trials() {
    let report = noisy_run(ProblemName::Bt11, 1e-3, 9, true, 200);
    let trials: u64 = report.trace.iter().map(|r| r.backtracks as u64 + 1).sum();
    // one evaluation at x_k per iteration plus one per line search trial
    assert_eq!(report.evaluations, report.trace.len() as u64 + trials);
}

#[test]
fn exact_unrelaxed_steps_decrease_the_merit() {
    for name in ProblemName::ALL {
        let p = get_problem(name);
        let cfg = SolverConfig {
            relaxation_enabled: false,
            max_iters: 100,
            stop_test: false,
            ..SolverConfig::default()
        };
        let report = solve(&p, &NoiseSpec::exact(), &cfg, None).unwrap();
        assert_eq!(report.status, Status::MaxIters, "{name}");
        check_ledger(&report, &cfg);
        for r in &report.trace {
            assert!(r.model_value < 0.0);
            assert!(r.merit_trial < r.merit_noisy, "{name} k={}", r.k);
        }
    }
}

#[test]
fn exact_runs_reach_kkt_points() {
    let known = [
        (ProblemName::Hs7, vec![0.0, 3f64.sqrt()], -(3f64.sqrt())),
        (
            ProblemName::Bt11,
            vec![2f64.powf(-1.0 / 3.0), 2f64.powf(-0.5), 2f64.powf(-11.0 / 12.0), 2f64.powf(-0.25)],
            -0.25,
        ),
    ];
    for (name, x_star, f_star) in known {
        let p = get_problem(name);
        let report = solve(&p, &NoiseSpec::exact(), &SolverConfig::default(), None).unwrap();
        assert_eq!(report.status, Status::Converged);
        let err = x_star.iter().zip(report.x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{name}: {err}");
        assert!((p.objective(&report.x).unwrap() - f_star).abs() < 1e-8);
    }
    let p = get_problem(ProblemName::Hs40);
    let report = solve(&p, &NoiseSpec::exact(), &SolverConfig::default(), None).unwrap();
    assert_eq!(report.status, Status::Converged);
    assert!((p.objective(&report.x).unwrap() - 0.8248917783).abs() < 1e-8);
}

#[test]
fn overestimated_noise_stops_early() {
    let p = get_problem(ProblemName::Hs7);
    let noise = NoiseSpec::new(1e-5, 1e-5, 2).unwrap();
    let truth = noise.bounds(p.n(), p.m());
    let run = |mult: f64| {
        let cfg = SolverConfig { max_iters: 10_000, ..SolverConfig::default() }.with_estimates(truth.scaled(mult));
        solve(&p, &noise, &cfg, None).unwrap()
    };
    let honest = run(1.0);
    let loose = run(1e3);
    assert_eq!(loose.status, Status::Converged);
    assert!(loose.iterations < honest.iterations);
    assert_eq!(run(1e-3).status, Status::LineSearchFailure);
}

#[test]
fn singular_jacobian_is_reported() {
    use noisy_sqp::{Problem, ProblemFunctions};
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    // c(x) = x1^2 has a vanishing Jacobian at the start point
    struct Flat;
    impl ProblemFunctions for Flat {
        fn objective(&self, x: &DVector<f64>) -> f64 {
            x[1]
        }
        fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, x[0] * x[0])
        }
        fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::from_column_slice(&[0.0, 1.0])
        }
        fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 0.0])
        }
    }
    let p = Problem::new("flat", 2, 1, DVector::zeros(2), Arc::new(Flat)).unwrap();
    let report = solve(&p, &NoiseSpec::exact(), &SolverConfig::default(), None).unwrap();
    assert_eq!(report.status, Status::SingularJacobian);
    assert_eq!(report.iterations, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ledger_holds_for_random_noise(
        idx in 0usize..3,
        eps_exp in -6.0..-1.0f64,
        seed in any::<u64>(),
        relaxation in any::<bool>(),
    ) {
        let name = ProblemName::ALL[idx];
        let report = noisy_run(name, 10f64.powf(eps_exp), seed, relaxation, 150);
        check_ledger(&report, &SolverConfig::default());
        prop_assert!(report.trace.iter().all(|r| r.psi.is_finite() && r.psi >= 0.0));
        if report.status == Status::LineSearchFailure {
            prop_assert_eq!(report.failure_iter, Some(report.trace.len() - 1));
        }
    }

    #[test]
    fn runs_are_deterministic_in_the_seed(idx in 0usize..3, seed in any::<u64>()) {
        let name = ProblemName::ALL[idx];
        let a = noisy_run(name, 1e-3, seed, true, 60);
        let b = noisy_run(name, 1e-3, seed, true, 60);
        prop_assert_eq!(a.trace, b.trace);
        prop_assert_eq!(a.x, b.x);
    }
}

#[test]
fn exact_hs7_within_500_iterations() {
    let p = get_problem(ProblemName::Hs7);
    let cfg = SolverConfig { max_iters: 500, ..SolverConfig::default() };
    let report = solve(&p, &NoiseSpec::exact(), &cfg, None).unwrap();
    assert!(matches!(report.status, Status::Converged | Status::MaxIters));
    let ev = p.eval_exact(&report.x).unwrap();
    let lam = noisy_sqp::linalg::least_squares_multiplier(&ev.jac, &ev.g).unwrap();
    assert!(ev.c.lp_norm(1) <= 1e-8);
    assert!(noisy_sqp::diagnostics::kkt_residual(&ev.g, &ev.jac, &(-lam)).unwrap() <= 1e-8);
}
