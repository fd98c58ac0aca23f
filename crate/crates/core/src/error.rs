use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum TrfError {
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("encode error: {0}")]
    Encode(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid length {len} (allowed 1..={max})")]
    Length { len: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("rescoring error: {0}")]
    Rescore(String),

    #[error("enumeration guard exceeded: {states} states (limit {limit})")]
    EnumerationGuard { states: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrfError> = std::result::Result<T, E>;
