//! Noise tolerant sequential quadratic programming for
//! `min f(x) s.t. c(x) = 0` when only bounded-noise evaluations of `f`, `c`
//! and their derivatives are available.
//!
//! The method is a classical l1-merit SQP iteration with `H_k = beta I` whose
//! Armijo test is relaxed by `2 (eps_f + pi eps_c)` so that noise alone cannot
//! make the line search fail. The [`harness`] module runs the benchmark
//! experiments on the built-in [`problems`].

pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod problem;
pub mod problems;
pub mod solver;

pub use error::{Error, Result};
pub use problem::{Evaluation, JacobianBound, NoiseBounds, NoiseSpec, NoisyOracle, Problem, ProblemFunctions};
pub use problems::{get_problem, reference_solution, ProblemName, ReferenceSolution};
pub use solver::{solve, IterateRecord, SolveReport, SolverConfig, Status};
