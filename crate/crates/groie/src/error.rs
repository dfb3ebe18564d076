use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),
    /// A configuration value is invalid (bad kernel size, axis, channel count, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// An input value is out of the operation's domain (bad label, degenerate box, ...).
    #[error("input error: {0}")]
    Input(String),
    /// The API was used outside its contract (backward on a non-scalar, ...).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
