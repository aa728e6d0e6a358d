use thiserror::Error;

/// Errors raised by model construction, filtering and optimization.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "matrix is not positive semidefinite: most negative eigenvalue {min_eigenvalue:e} (norm {norm:e})"
    )]
    NotPositiveSemidefinite { min_eigenvalue: f64, norm: f64 },

    #[error("matrix is not symmetric: relative asymmetry {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },

    #[error("innovation covariance is singular at step {step} (condition estimate {condition:e})")]
    SingularInnovation { step: usize, condition: f64 },

    #[error("cost function is not quadratic: probe residual {residual:e} exceeds {tolerance:e}")]
    NonQuadratic { residual: f64, tolerance: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures caused by the inputs rather than by the arithmetic.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidParameter(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
