//! Shared error type for the library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor or batch dimensions that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration that fails validation before any work starts.
    #[error("invalid config: {0}")]
    Config(String),

    /// Arithmetic produced a non-finite value. `location` names the parameter
    /// block (e.g. "trunk layer 1 weights") so divergence is attributable.
    #[error("non-finite value in {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// An operation called out of order, e.g. backward against a forward
    /// cache from a stale parameter version.
    #[error("invalid state: {0}")]
    State(String),

    /// The scoring oracle refuses searches it cannot finish exhaustively.
    #[error("candidate enumeration too large: ~{estimate:.3e} candidates exceeds limit {limit:.1e}")]
    GridTooLarge { estimate: f64, limit: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        CoreError::State(msg.into())
    }
}
