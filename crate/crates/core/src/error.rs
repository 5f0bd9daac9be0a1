//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DllError>;

#[derive(Debug, Error)]
pub enum DllError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("distribution not normalized in {op}: row {row} sums to {sum:e}")]
    NotNormalized { op: &'static str, row: usize, sum: f64 },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite gradient in parameter '{name}'")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at iteration {iteration} ({breakdown})")]
    NonFiniteLoss { iteration: u64, breakdown: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("degenerate metric input: {0}")]
    DegenerateMetricInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
