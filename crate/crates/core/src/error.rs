use thiserror::Error;

/// Errors produced by the O-spline library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine failed (factorization, overflow, quadrature).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An iterative solver ran out of iterations.
    #[error("no convergence after {iterations} iterations (last gradient norm {gradient_norm:.3e})")]
    Iteration { iterations: usize, gradient_norm: f64 },

    /// Malformed input data or configuration.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
