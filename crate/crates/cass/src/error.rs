//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by training, data handling, and analysis code.
#[derive(Debug, Error)]
pub enum CassError {
    /// Input data violates a precondition (non-finite values, wrong layout).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A caller broke an API contract (mismatched shapes, bad arguments).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A model variant is not known to the registry.
    #[error("unknown model variant: {0}")]
    Registry(String),

    /// Training diverged (NaN loss or a sustained anti-aligned plateau).
    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, CassError>;

impl From<serde_json::Error> for CassError {
    fn from(e: serde_json::Error) -> Self {
        CassError::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for CassError {
    fn from(e: toml::de::Error) -> Self {
        CassError::Serialization(e.to_string())
    }
}

impl From<toml::ser::Error> for CassError {
    fn from(e: toml::ser::Error) -> Self {
        CassError::Serialization(e.to_string())
    }
}
