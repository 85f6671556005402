//! Shared error type for all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a mathematical precondition (non-finite value,
    /// non-positive scale parameter, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Matrix or vector shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Cholesky factorization failed even after jitter. Carries an estimate
    /// of the matrix's minimum eigenvalue.
    #[error("Cholesky factorization failed (estimated min eigenvalue {min_eigenvalue:.3e})")]
    CholeskyFailed { min_eigenvalue: f64 },

    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The request exceeds a deliberate capability bound.
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// Malformed input data (CSV parse failures, empty datasets, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
