use thiserror::Error;

/// Errors produced anywhere in the equalizer toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {0} cannot be quantized")]
    NonFinite(f64),

    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("training diverged at batch {batch}: {reason}")]
    Diverged { batch: usize, reason: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
