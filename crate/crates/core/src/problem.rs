//! Equality-constrained problems and the oracles that evaluate them.
//!
//! A [`Problem`] bundles `min f(x) s.t. c(x) = 0` with analytic first
//! derivatives. Evaluations come either from the exact oracle
//! ([`Problem::eval_exact`]) or from a [`NoisyOracle`], which perturbs every
//! scalar it returns with an independent uniform draw: `U(-eps1, eps1)` on
//! function and constraint values, `U(-eps2, eps2)` on every gradient and
//! Jacobian entry.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Analytic oracle for `f`, `c`, `g = ∇f` and `J = ∇c`.
///
/// Implementations receive vectors of the problem dimension; [`Problem`]
/// checks lengths before dispatching.
pub trait ProblemFunctions: Send + Sync {
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// An equality-constrained problem with `m < n` constraints.
#[derive(Clone)]
pub struct Problem {
    name: String,
    n: usize,
    m: usize,
    x_start: DVector<f64>,
    funcs: Arc<dyn ProblemFunctions>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("x_start", &self.x_start.as_slice())
            .finish()
    }
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        x_start: DVector<f64>,
        funcs: Arc<dyn ProblemFunctions>,
    ) -> Result<Self> {
        if m == 0 || m >= n {
            return Err(Error::InvalidConfig(format!(
                "need 0 < m < n, got n = {n}, m = {m}"
            )));
        }
        check_len("start point", n, x_start.len())?;
        Ok(Self {
            name: name.into(),
            n,
            m,
            x_start,
            funcs,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of variables.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of equality constraints.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn x_start(&self) -> &DVector<f64> {
        &self.x_start
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        check_len("point", self.n, x.len())
    }

    pub fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.funcs.objective(x))
    }

    pub fn constraints(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x)?;
        Ok(self.funcs.constraints(x))
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x)?;
        Ok(self.funcs.gradient(x))
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        Ok(self.funcs.jacobian(x))
    }

    /// Exact `f, c, g, J` at `x`, packaged like a noisy evaluation with zero
    /// perturbation.
    pub fn eval_exact(&self, x: &DVector<f64>) -> Result<Evaluation> {
        self.check_point(x)?;
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &DVector<f64>) -> Evaluation {
        Evaluation {
            f: self.funcs.objective(x),
            c: self.funcs.constraints(x),
            g: self.funcs.gradient(x),
            jac: self.funcs.jacobian(x),
        }
    }
}

/// One evaluation of `(f, c, g, J)`, exact or perturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub f: f64,
    pub c: DVector<f64>,
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
}

/// How the Jacobian noise bound `eps_J` is derived from the per-entry
/// half-width `eps2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianBound {
    /// Worst case of the norm induced by l1 on `R^m` and l2 on `R^n`:
    /// `m * sqrt(n) * eps2`.
    #[default]
    InducedOneTwo,
    /// Frobenius-norm bound `sqrt(m * n) * eps2`.
    Frobenius,
}

/// Half-widths of the uniform noise and the seed of its stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub eps1: f64,
    pub eps2: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(eps1: f64, eps2: f64, seed: u64) -> Result<Self> {
        if !(eps1 >= 0.0 && eps2 >= 0.0) || !eps1.is_finite() || !eps2.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "noise half-widths must be finite and nonnegative, got eps1 = {eps1}, eps2 = {eps2}"
            )));
        }
        Ok(Self { eps1, eps2, seed })
    }

    /// No noise at all.
    pub fn exact() -> Self {
        Self {
            eps1: 0.0,
            eps2: 0.0,
            seed: 0,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.eps1 == 0.0 && self.eps2 == 0.0
    }

    /// Norm bounds on the perturbation of `f, c, g, J` for a problem with
    /// `n` variables and `m` constraints.
    pub fn bounds(&self, n: usize, m: usize) -> NoiseBounds {
        self.bounds_with(n, m, JacobianBound::default())
    }

    pub fn bounds_with(&self, n: usize, m: usize, jac: JacobianBound) -> NoiseBounds {
        let (n, m) = (n as f64, m as f64);
        let eps_j = match jac {
            JacobianBound::InducedOneTwo => m * n.sqrt() * self.eps2,
            JacobianBound::Frobenius => (m * n).sqrt() * self.eps2,
        };
        NoiseBounds {
            eps_f: self.eps1,
            eps_c: m * self.eps1,
            eps_g: n.sqrt() * self.eps2,
            eps_j,
        }
    }
}

/// `|f~ - f| <= eps_f`, `||c~ - c||_1 <= eps_c`, `||g~ - g|| <= eps_g`,
/// `||J~ - J||_{1,2} <= eps_j`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub eps_f: f64,
    pub eps_c: f64,
    pub eps_g: f64,
    pub eps_j: f64,
}

impl NoiseBounds {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            eps_f: factor * self.eps_f,
            eps_c: factor * self.eps_c,
            eps_g: factor * self.eps_g,
            eps_j: factor * self.eps_j,
        }
    }
}

/// Deterministic source of uniform noise.
///
/// Backed by ChaCha8 keyed by the seed, so the `k`-th draw of a run depends
/// only on `(seed, k)`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A draw from `U(-half_width, half_width)`.
    ///
    /// Always consumes one draw, even for a zero half-width, so streams stay
    /// aligned across noise levels.
    pub fn uniform(&mut self, half_width: f64) -> f64 {
        let u: f64 = self.rng.random();
        half_width * (2.0 * u - 1.0)
    }
}

/// Noisy oracle for one solver run. Owns its noise stream.
#[derive(Debug)]
pub struct NoisyOracle<'a> {
    problem: &'a Problem,
    spec: NoiseSpec,
    stream: NoiseStream,
    evaluations: u64,
}

impl<'a> NoisyOracle<'a> {
    pub fn new(problem: &'a Problem, spec: NoiseSpec) -> Self {
        Self {
            problem,
            spec,
            stream: NoiseStream::new(spec.seed),
            evaluations: 0,
        }
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    /// Number of oracle calls made so far (full and value-only).
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    /// Noisy `f~, c~, g~, J~` at `x`. Consumes `1 + m + n + m*n` draws, in
    /// that order (Jacobian row-major).
    pub fn eval(&mut self, x: &DVector<f64>) -> Result<Evaluation> {
        self.problem.check_point(x)?;
        let mut ev = self.problem.eval_unchecked(x);
        self.perturb_values(&mut ev.f, &mut ev.c);
        let eps2 = self.spec.eps2;
        for gi in ev.g.iter_mut() {
            *gi += self.stream.uniform(eps2);
        }
        let (m, n) = ev.jac.shape();
        for i in 0..m {
            for j in 0..n {
                ev.jac[(i, j)] += self.stream.uniform(eps2);
            }
        }
        self.evaluations += 1;
        Ok(ev)
    }

    /// Noisy `f~, c~` only, as needed for one merit evaluation.
    pub fn eval_values(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.problem.check_point(x)?;
        let mut f = self.problem.funcs.objective(x);
        let mut c = self.problem.funcs.constraints(x);
        self.perturb_values(&mut f, &mut c);
        self.evaluations += 1;
        Ok((f, c))
    }

    fn perturb_values(&mut self, f: &mut f64, c: &mut DVector<f64>) {
        let eps1 = self.spec.eps1;
        *f += self.stream.uniform(eps1);
        for ci in c.iter_mut() {
            *ci += self.stream.uniform(eps1);
        }
    }
}
