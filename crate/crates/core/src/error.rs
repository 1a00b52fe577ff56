//! Crate-wide error type.

/// Errors surfaced by tensor, convolution, model, and I/O operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dtype mismatch: {0}")]
    DtypeMismatch(String),

    #[error("arithmetic overflow in {0}")]
    Overflow(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: String, detail: String },

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape_mismatch(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
