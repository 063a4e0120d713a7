//! The three small CUTEst problems used in the experiments.
//!
//! | name | n | m | objective |
//! |------|---|---|-----------|
//! | HS7  | 2 | 1 | `ln(1 + x1^2) - x2` |
//! | BT11 | 4 | 3 | `-x1 x2 x3 x4` |
//! | HS40 | 5 | 3 | `(x1-1)^2 + (x1-x2)^2 + (x2-x3)^2 + (x3-x4)^4 + (x4-x5)^4` |
//!
//! Names follow the labels used throughout this crate; in CUTEst naming the
//! 4-variable problem is HS40 and the 5-variable one is BT11. The second
//! constraint of the 5-variable problem is `x2 - x3^2 + x4 = -2 + sqrt(8)`.
//!
//! Constraints are written as `c_i(x) = lhs - rhs`. Reference solutions are
//! not hard-coded: they come from an exact-oracle run of the solver and are
//! cached per process.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::kkt_residual;
use crate::error::{Error, Result};
use crate::linalg::least_squares_multiplier;
use crate::problem::{NoiseSpec, Problem, ProblemFunctions};
use crate::solver::{solve, SolverConfig, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProblemName {
    #[serde(rename = "HS7")]
    Hs7,
    #[serde(rename = "BT11")]
    Bt11,
    #[serde(rename = "HS40")]
    Hs40,
}

impl ProblemName {
    pub const ALL: [ProblemName; 3] = [ProblemName::Hs7, ProblemName::Bt11, ProblemName::Hs40];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemName::Hs7 => "HS7",
            ProblemName::Bt11 => "BT11",
            ProblemName::Hs40 => "HS40",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ProblemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HS7" => Ok(ProblemName::Hs7),
            "BT11" => Ok(ProblemName::Bt11),
            "HS40" => Ok(ProblemName::Hs40),
            _ => Err(Error::UnknownProblem(s.to_string())),
        }
    }
}

struct Hs7;

impl ProblemFunctions for Hs7 {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        (1.0 + x[0] * x[0]).ln() - x[1]
    }

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let a = 1.0 + x[0] * x[0];
        DVector::from_element(1, a * a + x[1] * x[1] - 4.0)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![2.0 * x[0] / (1.0 + x[0] * x[0]), -1.0])
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let a = 1.0 + x[0] * x[0];
        DMatrix::from_row_slice(1, 2, &[4.0 * x[0] * a, 2.0 * x[1]])
    }
}

struct Bt11;

impl ProblemFunctions for Bt11 {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        -x[0] * x[1] * x[2] * x[3]
    }

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            x[0].powi(3) + x[1] * x[1] - 1.0,
            x[0] * x[0] * x[3] - x[2],
            x[3] * x[3] - x[1],
        ])
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            -x[1] * x[2] * x[3],
            -x[0] * x[2] * x[3],
            -x[0] * x[1] * x[3],
            -x[0] * x[1] * x[2],
        ])
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        #[rustfmt::skip]
        let rows = [
            3.0 * x[0] * x[0],    2.0 * x[1], 0.0,  0.0,
            2.0 * x[0] * x[3],    0.0,        -1.0, x[0] * x[0],
            0.0,                  -1.0,       0.0,  2.0 * x[3],
        ];
        DMatrix::from_row_slice(3, 4, &rows)
    }
}

struct Hs40;

impl ProblemFunctions for Hs40 {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        (x[0] - 1.0).powi(2)
            + (x[0] - x[1]).powi(2)
            + (x[1] - x[2]).powi(2)
            + (x[2] - x[3]).powi(4)
            + (x[3] - x[4]).powi(4)
    }

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            x[0] + x[1] * x[1] + x[2].powi(3) - (-2.0 + 18f64.sqrt()),
            x[1] - x[2] * x[2] + x[3] - (-2.0 + 8f64.sqrt()),
            x[0] - x[4] - 2.0,
        ])
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let d01 = x[0] - x[1];
        let d12 = x[1] - x[2];
        let d23 = (x[2] - x[3]).powi(3);
        let d34 = (x[3] - x[4]).powi(3);
        DVector::from_vec(vec![
            2.0 * (x[0] - 1.0) + 2.0 * d01,
            -2.0 * d01 + 2.0 * d12,
            -2.0 * d12 + 4.0 * d23,
            -4.0 * d23 + 4.0 * d34,
            -4.0 * d34,
        ])
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        #[rustfmt::skip]
        let rows = [
            1.0, 2.0 * x[1], 3.0 * x[2] * x[2], 0.0, 0.0,
            0.0, 1.0,        -2.0 * x[2],       1.0, 0.0,
            1.0, 0.0,        0.0,               0.0, -1.0,
        ];
        DMatrix::from_row_slice(3, 5, &rows)
    }
}

pub fn get_problem(name: ProblemName) -> Problem {
    let (n, m, start, funcs): (usize, usize, Vec<f64>, Arc<dyn ProblemFunctions>) = match name {
        ProblemName::Hs7 => (2, 1, vec![2.0; 2], Arc::new(Hs7)),
        ProblemName::Bt11 => (4, 3, vec![0.8; 4], Arc::new(Bt11)),
        ProblemName::Hs40 => (5, 3, vec![2.0; 5], Arc::new(Hs40)),
    };
    Problem::new(name.as_str(), n, m, DVector::from_vec(start), funcs)
        .expect("built-in problem dimensions are consistent")
}

/// Looks a problem up by its (case-insensitive) name.
pub fn problem_by_name(name: &str) -> Result<Problem> {
    Ok(get_problem(name.parse()?))
}

/// Largest relative error between the analytic gradient/Jacobian and central
/// differences with step `h`. Each entry is scaled by `max(1, |analytic|)`.
pub fn verify_derivatives(problem: &Problem, x: &DVector<f64>, h: f64) -> Result<f64> {
    let g = problem.gradient(x)?;
    let jac = problem.jacobian(x)?;
    let rel = |exact: f64, approx: f64| (exact - approx).abs() / exact.abs().max(1.0);
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..problem.n() {
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let dg = (problem.objective(&xp)? - problem.objective(&xm)?) / (2.0 * h);
        worst = worst.max(rel(g[j], dg));
        let dc = (problem.constraints(&xp)? - problem.constraints(&xm)?) / (2.0 * h);
        for i in 0..problem.m() {
            worst = worst.max(rel(jac[(i, j)], dc[i]));
        }
        xp[j] = x[j];
        xm[j] = x[j];
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceSolution {
    pub x_star: DVector<f64>,
    pub f_star: f64,
    pub kkt_residual: f64,
    pub feasibility: f64,
    pub iterations: usize,
    pub source: &'static str,
}

/// Stationarity/feasibility target for reference solves.
const REFERENCE_TOL: f64 = 1e-11;
const REFERENCE_MAX_ITERS: usize = 200_000;

fn compute_reference(name: ProblemName) -> Result<ReferenceSolution> {
    let problem = get_problem(name);
    let cfg = SolverConfig {
        max_iters: REFERENCE_MAX_ITERS,
        exact_tol: REFERENCE_TOL,
        ..SolverConfig::default()
    };
    let report = solve(&problem, &NoiseSpec::exact(), &cfg, None)?;
    if report.status != Status::Converged {
        return Err(Error::ReferenceFailed {
            problem: name.to_string(),
            reason: format!("{:?} after {} iterations", report.status, report.iterations),
        });
    }
    let x = report.x;
    let ev = problem.eval_exact(&x)?;
    let lam = least_squares_multiplier(&ev.jac, &ev.g)?;
    Ok(ReferenceSolution {
        kkt_residual: kkt_residual(&ev.g, &ev.jac, &(-lam))?,
        feasibility: ev.c.lp_norm(1),
        f_star: ev.f,
        x_star: x,
        iterations: report.iterations,
        source: "exact-oracle solve",
    })
}

static REFERENCES: [OnceLock<std::result::Result<ReferenceSolution, String>>; 3] =
    [OnceLock::new(), OnceLock::new(), OnceLock::new()];

/// Exact-oracle solution from the standard start point, computed once.
pub fn reference_solution(name: ProblemName) -> Result<ReferenceSolution> {
    REFERENCES[name.index()]
        .get_or_init(|| compute_reference(name).map_err(|e| e.to_string()))
        .clone()
        .map_err(|reason| Error::ReferenceFailed {
            problem: name.to_string(),
            reason,
        })
}
