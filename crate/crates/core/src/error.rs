use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// The constraint Jacobian is (numerically) rank deficient.
    #[error("singular Jacobian: smallest singular value {sigma_min:e} is below tolerance {tol:e}")]
    SingularJacobian { sigma_min: f64, tol: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown problem `{0}` (expected one of HS7, BT11, HS40)")]
    UnknownProblem(String),

    #[error("reference solve for {problem} did not converge: {reason}")]
    ReferenceFailed { problem: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}
