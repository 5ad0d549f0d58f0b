//! Crate-wide error type.

/// Error type shared by all modules in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape/rank mismatch or invalid op arguments.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument outside of tensor shapes (bad stride, empty set, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (config, dataset files, checkpoints).
    #[error("parse error: {0}")]
    Parse(String),

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Configuration semantic error (unknown key, out-of-range value).
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a shape error.
pub fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
