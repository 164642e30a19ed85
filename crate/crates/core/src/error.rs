use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("singular matrix in {0}")]
    Singular(String),
    #[error("particle weights degenerate (max log-weight {max_log_weight})")]
    Degenerate { max_log_weight: f64 },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("index {index} out of range 1..={len}")]
    OutOfRange { index: usize, len: usize },
    #[error("simulation unstable: {0}")]
    Unstable(String),
    #[error("training diverged at epoch {epoch}; last good checkpoint: {last_good:?}")]
    Diverged { epoch: usize, last_good: Option<PathBuf> },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
