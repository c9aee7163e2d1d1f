//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration (presets, schedules, dataset specs).
    #[error("invalid config: {0}")]
    Config(String),

    /// Invalid argument to an operation.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Training diverged (loss exceeded the abort threshold or went non-finite).
    #[error("training diverged at iteration {iter}: loss = {loss}")]
    Diverged { iter: usize, loss: f64 },

    /// A verification check (gradcheck suite) failed.
    #[error("check failed: {0}")]
    Check(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("checkpoint format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for validation errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Config(_) | Error::Invalid(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
