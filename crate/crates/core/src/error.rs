use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite: eigenvalue {eigenvalue:e} at index {index}")]
    NotPositiveDefinite { index: usize, eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("non-finite drift at step {step}, particle {particle}")]
    NonFiniteDrift { step: usize, particle: usize },

    #[error("covariance block lost positive semidefiniteness at t = {t}: min eigenvalue {min_eigenvalue:e}")]
    LostPsd { t: f64, min_eigenvalue: f64 },

    #[error("iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("{outside} of {total} particles lie outside the grid box; enlarge the box")]
    OutsideGrid { outside: usize, total: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero mass in grid cell {0}")]
    ZeroMass(usize),

    #[error("config error at line {line}, column {column}: {message}")]
    Config {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
