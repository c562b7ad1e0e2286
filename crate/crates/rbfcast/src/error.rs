//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Array/coordinate dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid argument or inconsistent configuration.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A file did not match the expected schema.
    #[error("schema violation: {0}")]
    Schema(String),

    /// A linear solve could not be completed (singular or indefinite system).
    #[error("solver failure: {0}")]
    Solver(String),

    /// Numerical breakdown during iteration (divergence, non-finite state).
    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for validation problems, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Solver(_) | Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
