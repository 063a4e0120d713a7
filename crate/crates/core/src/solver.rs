//! Noise tolerant SQP iteration.
//!
//! Each iteration draws one noisy evaluation at `x_k`, solves the subproblem
//! with `H_k = beta I`, raises the penalty parameter if the least-squares
//! multiplier demands it, and backtracks by halving until the relaxed Armijo
//! condition
//!
//! ```text
//! phi~(x_k + a d_k) <= phi~(x_k) + nu a l~(x_k; d_k) + eps_R,   eps_R = 2 (eps_f + pi_k eps_c)
//! ```
//!
//! holds. With relaxation disabled `eps_R = 0` and this is the classical
//! l1-merit SQP line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::diagnose;
use crate::error::{check_len, Error, Result};
use crate::linalg::solve_sqp_step;
use crate::problem::{NoiseBounds, NoiseSpec, NoisyOracle, Problem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Armijo fraction.
    pub nu: f64,
    /// Penalty margin.
    pub tau: f64,
    /// Constant Hessian scaling `H_k = beta I`.
    pub beta: f64,
    /// Penalty parameter before the first update.
    pub pi_init: f64,
    pub relaxation_enabled: bool,
    pub eps_f_est: f64,
    pub eps_c_est: f64,
    pub eps_g_est: f64,
    pub eps_j_est: f64,
    pub alpha_init: f64,
    pub max_backtracks: usize,
    pub max_iters: usize,
    /// Stop as soon as the noisy KKT test passes. Fixed-budget experiments
    /// turn this off and run to `max_iters`.
    pub stop_test: bool,
    /// Replaces zero noise estimates in the stop test, so exact runs can
    /// terminate.
    pub exact_tol: f64,
    /// Rounding-error level of the evaluations. With relaxation enabled the
    /// noise estimates used in `eps_R` are floored at
    /// `roundoff * (1 + |f~|)` and `roundoff * m`, so exact-oracle runs do not
    /// stall once merit decreases fall below rounding error.
    pub roundoff: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            nu: 0.1,
            tau: 0.9,
            beta: 50.0,
            pi_init: 1.0,
            relaxation_enabled: true,
            eps_f_est: 0.0,
            eps_c_est: 0.0,
            eps_g_est: 0.0,
            eps_j_est: 0.0,
            alpha_init: 1.0,
            max_backtracks: 50,
            max_iters: 1000,
            stop_test: true,
            exact_tol: 1e-8,
            roundoff: 10.0 * f64::EPSILON,
        }
    }
}

impl SolverConfig {
    /// Sets all four noise estimates.
    pub fn with_estimates(mut self, est: NoiseBounds) -> Self {
        self.eps_f_est = est.eps_f;
        self.eps_c_est = est.eps_c;
        self.eps_g_est = est.eps_g;
        self.eps_j_est = est.eps_j;
        self
    }

    pub fn estimates(&self) -> NoiseBounds {
        NoiseBounds {
            eps_f: self.eps_f_est,
            eps_c: self.eps_c_est,
            eps_g: self.eps_g_est,
            eps_j: self.eps_j_est,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        let checks = [
            (open_unit(self.nu), "nu must lie in (0, 1)"),
            (open_unit(self.tau), "tau must lie in (0, 1)"),
            (positive(self.beta), "beta must be positive"),
            (positive(self.pi_init), "pi_init must be positive"),
            (positive(self.alpha_init), "alpha_init must be positive"),
            (positive(self.exact_tol), "exact_tol must be positive"),
            (nonneg(self.roundoff), "roundoff must be nonnegative"),
            (
                nonneg(self.eps_f_est)
                    && nonneg(self.eps_c_est)
                    && nonneg(self.eps_g_est)
                    && nonneg(self.eps_j_est),
                "noise estimates must be nonnegative",
            ),
            (self.max_backtracks > 0, "max_backtracks must be positive"),
            (self.max_iters > 0, "max_iters must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).to_string())),
            None => Ok(()),
        }
    }
}

/// `phi~ = f~ + pi |c~|_1`
pub fn merit_value(f: f64, c: &DVector<f64>, pi: f64) -> f64 {
    f + pi * c.lp_norm(1)
}

/// First-order model of the merit change along `d`:
/// `g^T d + pi |c + J d|_1 - pi |c|_1`.
pub fn linear_model(
    g: &DVector<f64>,
    c: &DVector<f64>,
    jac: &DMatrix<f64>,
    d: &DVector<f64>,
    pi: f64,
) -> Result<f64> {
    check_len("step", jac.ncols(), d.len())?;
    check_len("gradient", jac.ncols(), g.len())?;
    check_len("constraint vector", jac.nrows(), c.len())?;
    let linearized = c + jac * d;
    Ok(g.dot(d) + pi * linearized.lp_norm(1) - pi * c.lp_norm(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenaltyState {
    pub pi: f64,
}

impl PenaltyState {
    pub fn new(pi: f64) -> Self {
        Self { pi }
    }

    /// Keeps `pi` if `pi >= |lambda|_inf / (1 - tau)`, otherwise jumps to
    /// twice that threshold.
    pub fn update(self, lambda_hat: &DVector<f64>, tau: f64) -> Self {
        let threshold = lambda_hat.amax() / (1.0 - tau);
        // a tie up to rounding in 1 - tau counts as satisfied
        if self.pi >= threshold * (1.0 - 4.0 * f64::EPSILON) {
            self
        } else {
            Self { pi: 2.0 * threshold }
        }
    }
}

pub fn update_penalty(state: PenaltyState, lambda_hat: &DVector<f64>, tau: f64) -> PenaltyState {
    state.update(lambda_hat, tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchStep {
    pub alpha: f64,
    pub backtracks: usize,
    /// Merit value observed at the accepted trial point.
    pub merit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("line search failed: no step in {trials} halvings satisfied the sufficient decrease test")]
pub struct LineSearchFailure {
    pub trials: usize,
}

/// Tries `alpha_init * 2^-j` for `j = 0..=max_backtracks`, one call of
/// `merit_at` per trial, and returns the first step with
/// `merit_at(alpha) <= merit_0 + nu * alpha * model + eps_r`.
pub fn relaxed_line_search<F>(
    mut merit_at: F,
    merit_0: f64,
    model: f64,
    nu: f64,
    eps_r: f64,
    alpha_init: f64,
    max_backtracks: usize,
) -> std::result::Result<LineSearchStep, LineSearchFailure>
where
    F: FnMut(f64) -> f64,
{
    let mut alpha = alpha_init;
    for backtracks in 0..=max_backtracks {
        let merit = merit_at(alpha);
        if merit <= merit_0 + nu * alpha * model + eps_r {
            return Ok(LineSearchStep {
                alpha,
                backtracks,
                merit,
            });
        }
        alpha *= 0.5;
    }
    Err(LineSearchFailure {
        trials: max_backtracks + 1,
    })
}

/// Noisy KKT test: `|c|_1 <= eps_c` and `|g + J^T lambda| <= eps_g + |lambda|_inf eps_J`.
pub fn check_termination(
    c: &DVector<f64>,
    g: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: &DVector<f64>,
    eps_c_est: f64,
    eps_g_est: f64,
    eps_j_est: f64,
) -> bool {
    let feasible = c.lp_norm(1) <= eps_c_est;
    let residual = (g + jac.tr_mul(lambda)).norm();
    feasible && residual <= eps_g_est + lambda.amax() * eps_j_est
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIters,
    LineSearchFailure,
    SingularJacobian,
}

/// One trace row per line search performed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateRecord {
    pub k: usize,
    pub x: Vec<f64>,
    /// Accepted step length, 0 when the search failed.
    pub alpha: f64,
    pub pi: f64,
    /// `phi~(x_k)` with the updated `pi_k`.
    pub merit_noisy: f64,
    /// Merit observed at the accepted trial point (NaN on failure).
    pub merit_trial: f64,
    pub model_value: f64,
    pub eps_r: f64,
    /// `|x_k - x*|`, NaN without a reference point.
    pub dist_to_ref: f64,
    /// Exact-oracle stationarity measure at `x_k`.
    pub psi: f64,
    pub backtracks: usize,
    pub line_search_failed: bool,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub x: DVector<f64>,
    pub status: Status,
    pub trace: Vec<IterateRecord>,
    /// Index of the iterate at which the run stopped.
    pub iterations: usize,
    pub failure_iter: Option<usize>,
    /// `|x_final - x*|`, NaN without a reference point.
    pub final_dist: f64,
    pub final_pi: f64,
    pub evaluations: u64,
}

impl SolveReport {
    /// `min |x_k - x*|` over `k <= k_max` and the first index attaining it.
    pub fn min_dist_up_to(&self, k_max: usize) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        let dists = self
            .trace
            .iter()
            .map(|r| (r.dist_to_ref, r.k))
            .chain(std::iter::once((self.final_dist, self.iterations)));
        for (d, k) in dists {
            if k > k_max {
                break;
            }
            if d < best.0 {
                best = (d, k);
            }
        }
        best
    }

    pub fn min_dist(&self) -> (f64, usize) {
        self.min_dist_up_to(usize::MAX)
    }
}

fn dist(x: &DVector<f64>, reference: Option<&DVector<f64>>) -> f64 {
    reference.map_or(f64::NAN, |r| (x - r).norm())
}

/// Runs the noise tolerant SQP method from the problem's start point.
///
/// Terminal events (line search failure, singular Jacobian, iteration limit)
/// are reported through [`SolveReport::status`] with the trace intact; only
/// invalid input is an `Err`.
pub fn solve(
    problem: &Problem,
    noise: &NoiseSpec,
    cfg: &SolverConfig,
    reference: Option<&DVector<f64>>,
) -> Result<SolveReport> {
    cfg.validate()?;
    if let Some(r) = reference {
        check_len("reference point", problem.n(), r.len())?;
    }

    // Zero estimates can never be met by a noisy test; treat them as exact mode.
    let stop_eps_c = if cfg.eps_c_est == 0.0 { cfg.exact_tol } else { cfg.eps_c_est };
    let stop_eps_g = if cfg.eps_g_est == 0.0 { cfg.exact_tol } else { cfg.eps_g_est };

    let mut oracle = NoisyOracle::new(problem, *noise);
    let mut x = problem.x_start().clone();
    let mut penalty = PenaltyState::new(cfg.pi_init);
    let mut trace = Vec::new();

    let mut k = 0;
    let status = loop {
        if k == cfg.max_iters {
            break Status::MaxIters;
        }
        let ev = oracle.eval(&x)?;
        let step = match solve_sqp_step(&ev.jac, &ev.c, &ev.g, cfg.beta) {
            Ok(step) => step,
            Err(Error::SingularJacobian { .. }) => break Status::SingularJacobian,
            Err(e) => return Err(e),
        };

        if cfg.stop_test {
            let lambda = -&step.lambda_hat;
            if check_termination(&ev.c, &ev.g, &ev.jac, &lambda, stop_eps_c, stop_eps_g, cfg.eps_j_est) {
                break Status::Converged;
            }
        }

        penalty = penalty.update(&step.lambda_hat, cfg.tau);
        let pi = penalty.pi;
        let model = linear_model(&ev.g, &ev.c, &ev.jac, &step.d, pi)?;
        let merit_0 = merit_value(ev.f, &ev.c, pi);
        let eps_r = if cfg.relaxation_enabled {
            let eps_f = cfg.eps_f_est.max(cfg.roundoff * (1.0 + ev.f.abs()));
            let eps_c = cfg.eps_c_est.max(cfg.roundoff * problem.m() as f64);
            2.0 * (eps_f + pi * eps_c)
        } else {
            0.0
        };

        let search = relaxed_line_search(
            |alpha| {
                let trial = &x + alpha * &step.d;
                let (f, c) = oracle
                    .eval_values(&trial)
                    .expect("trial point has the problem dimension");
                merit_value(f, &c, pi)
            },
            merit_0,
            model,
            cfg.nu,
            eps_r,
            cfg.alpha_init,
            cfg.max_backtracks,
        );

        let psi = diagnose(problem, &x, pi, cfg.tau, cfg.beta)?.psi;
        let mut row = IterateRecord {
            k,
            x: x.as_slice().to_vec(),
            alpha: 0.0,
            pi,
            merit_noisy: merit_0,
            merit_trial: f64::NAN,
            model_value: model,
            eps_r,
            dist_to_ref: dist(&x, reference),
            psi,
            backtracks: cfg.max_backtracks,
            line_search_failed: true,
        };
        match search {
            Ok(ls) => {
                row.alpha = ls.alpha;
                row.merit_trial = ls.merit;
                row.backtracks = ls.backtracks;
                row.line_search_failed = false;
                trace.push(row);
                x += ls.alpha * &step.d;
                k += 1;
            }
            Err(_) => {
                trace.push(row);
                break Status::LineSearchFailure;
            }
        }
    };

    Ok(SolveReport {
        final_dist: dist(&x, reference),
        failure_iter: (status == Status::LineSearchFailure).then_some(k),
        iterations: k,
        x,
        status,
        trace,
        final_pi: penalty.pi,
        evaluations: oracle.evaluations(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn merit_examples() {
        assert_eq!(merit_value(1.0, &vec(&[0.0, 0.0]), 10.0), 1.0);
        assert_eq!(merit_value(0.0, &vec(&[1.0, -2.0]), 2.0), 6.0);
        assert_eq!(merit_value(-3f64.sqrt(), &vec(&[0.0]), 5.0), -3f64.sqrt());
    }

    #[test]
    fn model_examples() {
        let j = mat(1, 2, &[1.0, 0.0]);
        let zero = linear_model(&vec(&[1.0, 2.0]), &vec(&[3.0]), &j, &vec(&[0.0, 0.0]), 4.0).unwrap();
        assert_eq!(zero, 0.0);
        let m = linear_model(&vec(&[1.0, 0.0]), &vec(&[1.0]), &j, &vec(&[-1.0, 0.0]), 2.0).unwrap();
        assert_eq!(m, -3.0);
        let m = linear_model(&vec(&[0.0, 1.0]), &vec(&[2.0]), &j, &vec(&[-2.0, -1.0]), 3.0).unwrap();
        assert_eq!(m, -7.0);
        assert!(linear_model(&vec(&[0.0, 1.0]), &vec(&[2.0]), &j, &vec(&[1.0]), 3.0).is_err());
    }

    #[test]
    fn penalty_examples() {
        let lam = |v: f64| vec(&[v, -v / 2.0]);
        assert_eq!(update_penalty(PenaltyState::new(10.0), &lam(0.5), 0.9).pi, 10.0);
        let raised = update_penalty(PenaltyState::new(1.0), &lam(0.5), 0.9).pi;
        assert!((raised - 10.0).abs() < 1e-12);
        // threshold exactly 10 keeps pi = 10
        assert_eq!(update_penalty(PenaltyState::new(10.0), &vec(&[1.0]), 0.9).pi, 10.0);
        assert!(update_penalty(PenaltyState::new(10.0), &vec(&[1.0 + 1e-12]), 0.9).pi > 20.0);
    }

    #[test]
    fn line_search_examples() {
        let ok = relaxed_line_search(|a| 5.0 - 0.5 * a, 5.0, -1.0, 0.1, 0.0, 1.0, 50).unwrap();
        assert_eq!((ok.alpha, ok.backtracks), (1.0, 0));

        let relaxed = relaxed_line_search(|_| 5.05, 5.0, -1.0, 0.1, 0.2, 1.0, 50).unwrap();
        assert_eq!((relaxed.alpha, relaxed.backtracks), (1.0, 0));

        let mut calls = 0;
        let fail = relaxed_line_search(
            |a| {
                calls += 1;
                5.0 + a
            },
            5.0,
            -1.0,
            0.5,
            0.0,
            1.0,
            30,
        );
        assert_eq!(fail, Err(LineSearchFailure { trials: 31 }));
        assert_eq!(calls, 31);
    }

    #[test]
    fn line_search_halves() {
        // accepts once alpha <= 1/8
        let ls = relaxed_line_search(|a| if a > 0.125 { 1.0 } else { -a }, 0.0, -1.0, 0.1, 0.0, 1.0, 50).unwrap();
        assert_eq!(ls.alpha, 0.125);
        assert_eq!(ls.backtracks, 3);
        assert_eq!(ls.alpha, 2f64.powi(-(ls.backtracks as i32)));
    }

    #[test]
    fn termination_examples() {
        let j = mat(1, 2, &[1.0, 0.0]);
        assert!(check_termination(&vec(&[0.0]), &vec(&[0.0, 0.0]), &j, &vec(&[0.0]), 0.0, 0.0, 0.0));
        assert!(!check_termination(&vec(&[0.02]), &vec(&[0.0, 0.0]), &j, &vec(&[0.0]), 0.01, 1.0, 1.0));
        assert!(check_termination(&vec(&[0.0]), &vec(&[0.5, 0.0]), &j, &vec(&[-0.5]), 1e-3, 1e-3, 1e-3));
        assert!(!check_termination(&vec(&[0.0]), &vec(&[0.5, 0.01]), &j, &vec(&[-0.5]), 1e-3, 1e-3, 1e-3));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = [
            SolverConfig { nu: 1.0, ..Default::default() },
            SolverConfig { tau: 0.0, ..Default::default() },
            SolverConfig { beta: -1.0, ..Default::default() },
            SolverConfig { pi_init: 0.0, ..Default::default() },
            SolverConfig { eps_c_est: -1e-3, ..Default::default() },
            SolverConfig { max_iters: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn config_from_partial_json() {
        let cfg: SolverConfig = serde_json::from_str(r#"{"beta": 10, "relaxation_enabled": false}"#).unwrap();
        assert_eq!(cfg.beta, 10.0);
        assert!(!cfg.relaxation_enabled);
        assert_eq!(cfg.nu, 0.1);
        assert!(serde_json::from_str::<SolverConfig>(r#"{"betta": 10}"#).is_err());
    }
}
