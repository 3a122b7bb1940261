//! Shared error type for the whole crate.

use crate::curvature::SubspaceBasis;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// Shape mismatches between vectors and matrices are programming errors and
/// panic instead; these variants cover domain errors a caller can provoke
/// with valid types but invalid values.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size limit exceeded: {what} is {actual}, limit {limit}")]
    SizeLimit {
        what: &'static str,
        actual: usize,
        limit: usize,
    },

    #[error("sample index {index} out of range for {max} samples")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("factorization failed: matrix not positive definite at pivot {pivot}")]
    FactorizationFailure { pivot: usize },

    #[error(
        "eigensolver did not converge for eigenpair {index} within {iterations} iterations \
         (residual {residual:.3e})"
    )]
    EigNonConvergence {
        index: usize,
        iterations: usize,
        residual: f64,
        /// Eigenpairs extracted before the failure.
        partial: Box<SubspaceBasis>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category string, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::SizeLimit { .. } => "size-limit",
            Error::IndexOutOfRange { .. } => "index-out-of-range",
            Error::FactorizationFailure { .. } => "factorization-failure",
            Error::EigNonConvergence { .. } => "eig-non-convergence",
            Error::Config(_) => "config",
            Error::CorruptFile { .. } => "corrupt-file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid_argument(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
