//! Stationarity diagnostics.
//!
//! `psi_pi(x) = (1/b_u) |P(x) g(x)|^2 + pi * tau * |c(x)|_1` vanishes exactly at
//! KKT points and is what the iterates are expected to drive down to a
//! noise-determined plateau. The harness evaluates it with exact oracles.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_len, Result};
use crate::linalg::{min_singular_value, Gram};
use crate::problem::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticsRow {
    pub psi: f64,
    pub kkt_residual: f64,
    pub feasibility: f64,
    pub sigma_min: f64,
}

pub fn stationarity_psi(
    g: &DVector<f64>,
    c: &DVector<f64>,
    jac: &DMatrix<f64>,
    pi: f64,
    tau: f64,
    b_u: f64,
) -> Result<f64> {
    check_len("gradient", jac.ncols(), g.len())?;
    check_len("constraint vector", jac.nrows(), c.len())?;
    let pg = Gram::new(jac)?.project(g);
    Ok(pg.norm_squared() / b_u + pi * tau * c.lp_norm(1))
}

/// `|g + J^T lambda|`
///
/// Note the sign: the least-squares multiplier `(J J^T)^{-1} J g` minimizes
/// `|g - J^T lambda|`, so pass its negation here.
pub fn kkt_residual(g: &DVector<f64>, jac: &DMatrix<f64>, lambda: &DVector<f64>) -> Result<f64> {
    check_len("gradient", jac.ncols(), g.len())?;
    check_len("multiplier", jac.nrows(), lambda.len())?;
    Ok((g + jac.tr_mul(lambda)).norm())
}

/// Exact-oracle diagnostics at `x`. The KKT residual uses the least-squares
/// multiplier, so it equals `|P g|`.
pub fn diagnose(problem: &Problem, x: &DVector<f64>, pi: f64, tau: f64, b_u: f64) -> Result<DiagnosticsRow> {
    let ev = problem.eval_exact(x)?;
    let feasibility = ev.c.lp_norm(1);
    let sigma_min = min_singular_value(&ev.jac);
    let row = match Gram::new(&ev.jac) {
        Ok(gram) => {
            let pg = gram.project(&ev.g);
            DiagnosticsRow {
                psi: pg.norm_squared() / b_u + pi * tau * feasibility,
                kkt_residual: pg.norm(),
                feasibility,
                sigma_min,
            }
        }
        Err(_) => DiagnosticsRow {
            psi: f64::NAN,
            kkt_residual: f64::NAN,
            feasibility,
            sigma_min,
        },
    };
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{least_squares_multiplier, project_tangent};
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn vec(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    #[test]
    fn psi_examples() {
        let j = mat(1, 2, &[1.0, 0.0]);
        let psi = stationarity_psi(&vec(&[5.0, 0.0]), &vec(&[0.0]), &j, 3.0, 0.9, 50.0).unwrap();
        assert_eq!(psi, 0.0);
        let psi = stationarity_psi(&vec(&[0.0, 1.0]), &vec(&[1.0]), &j, 2.0, 0.9, 1.0).unwrap();
        assert!((psi - 2.8).abs() < 1e-15);
    }

    #[test]
    fn psi_singular_jacobian() {
        let j = mat(1, 2, &[0.0, 0.0]);
        assert!(stationarity_psi(&vec(&[1.0, 1.0]), &vec(&[1.0]), &j, 1.0, 0.9, 1.0).is_err());
    }

    #[test]
    fn residual_examples() {
        let j = mat(1, 2, &[1.0, 0.0]);
        assert_eq!(kkt_residual(&vec(&[0.0, 0.0]), &j, &vec(&[0.0])).unwrap(), 0.0);
        assert_eq!(kkt_residual(&vec(&[2.0, 0.0]), &j, &vec(&[-2.0])).unwrap(), 0.0);
        assert_eq!(kkt_residual(&vec(&[2.0, 1.0]), &j, &vec(&[-2.0])).unwrap(), 1.0);
    }

    fn instance() -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>, DVector<f64>)> {
        (2usize..=6)
            .prop_flat_map(|n| (Just(n), 1usize..n))
            .prop_flat_map(|(n, m)| {
                (
                    prop::collection::vec(-2.0..2.0f64, m * n),
                    prop::collection::vec(-2.0..2.0f64, n),
                    prop::collection::vec(-2.0..2.0f64, m),
                )
                    .prop_map(move |(j, g, c)| {
                        (DMatrix::from_row_slice(m, n, &j), DVector::from_vec(g), DVector::from_vec(c))
                    })
            })
            .prop_filter("full rank", |(j, _, _)| {
                let sv = j.singular_values();
                sv.min() > 1e-3 * sv.max()
            })
    }

    proptest! {
        #[test]
        fn psi_matches_explicit_projector((j, g, c) in instance(), pi in 0.1..10.0f64) {
            let n = j.ncols();
            let p = DMatrix::identity(n, n)
                - j.transpose() * (&j * j.transpose()).try_inverse().unwrap() * &j;
            let expected = (p * &g).norm_squared() / 50.0 + pi * 0.9 * c.lp_norm(1);
            let psi = stationarity_psi(&g, &c, &j, pi, 0.9, 50.0).unwrap();
            prop_assert!((psi - expected).abs() <= 1e-10 * (1.0 + expected));
            prop_assert!(psi >= 0.0);
        }

        #[test]
        fn psi_monotone_in_penalty((j, g, c) in instance(), pi in 0.1..10.0f64, bump in 0.1..10.0f64) {
            let lo = stationarity_psi(&g, &c, &j, pi, 0.9, 50.0).unwrap();
            let hi = stationarity_psi(&g, &c, &j, pi + bump, 0.9, 50.0).unwrap();
            prop_assert!(hi >= lo);
            if c.lp_norm(1) > 0.0 {
                prop_assert!(hi > lo);
            }
        }

        #[test]
        fn residual_at_least_squares_multiplier_is_projected_gradient((j, g, _c) in instance()) {
            let lam = least_squares_multiplier(&j, &g).unwrap();
            let res = kkt_residual(&g, &j, &(-lam)).unwrap();
            let pg = project_tangent(&j, &g).unwrap().norm();
            prop_assert!((res - pg).abs() <= 1e-10 * (1.0 + g.norm()));
        }
    }
}
