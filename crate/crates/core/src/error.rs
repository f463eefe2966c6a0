use thiserror::Error;

/// Errors raised by the gdkd library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input contained NaN/Inf or was otherwise malformed.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter fell outside its mathematical domain (T <= 0, k >= C, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("empty partition group")]
    EmptyPartition,

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Input is valid but degenerate for the requested operation (constant logits for z-scoring).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Last epoch record whose metrics were all finite.
        last_good: Option<Box<crate::trainer::TrainRecord>>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
