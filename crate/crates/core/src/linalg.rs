//! Dense kernels for the SQP step with `H = beta * I`.
//!
//! Everything goes through the `m x m` Gram matrix `J J^T`: the least-squares
//! multiplier, the tangent-space projection `P w = w - J^T (J J^T)^{-1} J w`,
//! and the step decomposition `d = v + u` with
//! `v = -J^T (J J^T)^{-1} c` and `u = -(1/beta) P g`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};

use crate::error::{check_len, Error, Result};

/// Relative rank tolerance: `sigma_min <= RANK_TOL * sigma_max` is singular.
pub const RANK_TOL: f64 = 1e-10;

/// Result of one SQP subproblem solve.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Full step `v + u`.
    pub d: DVector<f64>,
    /// Normal component, restores linearized feasibility.
    pub v: DVector<f64>,
    /// Tangential component, lies in the null space of `J`.
    pub u: DVector<f64>,
    /// Least-squares multiplier `(J J^T)^{-1} J g`.
    pub lambda_hat: DVector<f64>,
    pub beta: f64,
}

enum GramFactor {
    Cholesky(Cholesky<f64, Dyn>),
    Svd(SVD<f64, Dyn, Dyn>),
}

/// Factorization of `J J^T` for a full-row-rank Jacobian.
pub struct Gram<'a> {
    jac: &'a DMatrix<f64>,
    factor: GramFactor,
    sigma_min: f64,
}

impl<'a> Gram<'a> {
    pub fn new(jac: &'a DMatrix<f64>) -> Result<Self> {
        let (m, n) = jac.shape();
        if m == 0 || m > n {
            return Err(Error::InvalidConfig(format!(
                "Jacobian must be m x n with 0 < m <= n, got {m} x {n}"
            )));
        }
        let sv = jac.singular_values();
        let sigma_min = sv.min();
        let tol = RANK_TOL * sv.max();
        if !(sigma_min > tol) {
            return Err(Error::SingularJacobian { sigma_min, tol });
        }
        let gram = jac * jac.transpose();
        let factor = match gram.clone().cholesky() {
            Some(chol) => GramFactor::Cholesky(chol),
            None => GramFactor::Svd(gram.svd(true, true)),
        };
        Ok(Self {
            jac,
            factor,
            sigma_min,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    /// `(J J^T)^{-1} rhs`
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            GramFactor::Cholesky(chol) => chol.solve(rhs),
            GramFactor::Svd(svd) => svd
                .solve(rhs, 0.0)
                .expect("SVD of the Gram matrix was computed with both factors"),
        }
    }

    /// `(J J^T)^{-1} J g`
    pub fn multiplier(&self, g: &DVector<f64>) -> DVector<f64> {
        self.solve(&(self.jac * g))
    }

    /// `P w` without forming `P`.
    pub fn project(&self, w: &DVector<f64>) -> DVector<f64> {
        w - self.jac.tr_mul(&self.multiplier(w))
    }

    /// Minimum-norm solution of `J v = -c`.
    pub fn normal_step(&self, c: &DVector<f64>) -> DVector<f64> {
        -self.jac.tr_mul(&self.solve(c))
    }
}

pub fn least_squares_multiplier(jac: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("gradient", jac.ncols(), g.len())?;
    Ok(Gram::new(jac)?.multiplier(g))
}

/// Orthogonal projection of `w` onto the null space of `jac`.
pub fn project_tangent(jac: &DMatrix<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("vector", jac.ncols(), w.len())?;
    Ok(Gram::new(jac)?.project(w))
}

/// Solves `min 1/2 beta |d|^2 + g^T d  s.t.  c + J d = 0` in closed form.
pub fn solve_sqp_step(
    jac: &DMatrix<f64>,
    c: &DVector<f64>,
    g: &DVector<f64>,
    beta: f64,
) -> Result<StepResult> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "beta must be positive, got {beta}"
        )));
    }
    check_len("constraint vector", jac.nrows(), c.len())?;
    check_len("gradient", jac.ncols(), g.len())?;
    let gram = Gram::new(jac)?;
    let lambda_hat = gram.multiplier(g);
    let v = gram.normal_step(c);
    let u = -(g - jac.tr_mul(&lambda_hat)) / beta;
    Ok(StepResult {
        d: &v + &u,
        v,
        u,
        lambda_hat,
        beta,
    })
}

pub fn min_singular_value(jac: &DMatrix<f64>) -> f64 {
    if jac.is_empty() {
        return 0.0;
    }
    jac.singular_values().min()
}
