use thiserror::Error;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("svd did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("rank {rank} out of range (max {max})")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("activation stream for {0} is empty")]
    EmptyStream(String),
    #[error("covariance is degenerate (zero trace)")]
    Degenerate,
    #[error("incompatible topology: {0}")]
    IncompatibleTopology(String),
    #[error("invalid drop rate {0}")]
    InvalidRate(f64),
    #[error("missing covariance for {0}")]
    MissingCovariance(String),
    #[error("invalid budget: rho={rho} gamma={gamma}")]
    InvalidBudget { rho: f64, gamma: f64 },
    #[error("every task is already exempt")]
    AllExempt,
    #[error("recipe schema: {}", .0.join("; "))]
    Schema(Vec<String>),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::IoFailure { .. } => ErrorClass::Io,
            Error::NonFinite
            | Error::NoConvergence(_)
            | Error::NotPositiveDefinite { .. }
            | Error::Singular
            | Error::Degenerate => ErrorClass::Numerical,
            _ => ErrorClass::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
