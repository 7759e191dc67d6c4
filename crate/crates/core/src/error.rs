use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("discovery did not converge: h(W) = {residual:e} after {iterations} outer iterations")]
    NotConverged {
        residual: f64,
        iterations: usize,
        /// Best iterate found before giving up.
        best: Box<crate::discovery::DiscoveryResult>,
    },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("environment fault at step {step}: {message}")]
    Environment { step: usize, message: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
