//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid model spec at layer {layer}: {reason}")]
    InvalidSpec { layer: usize, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite values at {location}")]
    NonFinite { location: String },

    #[error("missing parameter entry `{path}`")]
    MissingEntry { path: String },

    #[error("parameter entry `{path}`: {reason}")]
    BadEntry { path: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("module `{path}`: {source}")]
    Module {
        path: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Wraps an error with the module path it occurred in.
    pub fn in_module(self, path: &str) -> Self {
        CoreError::Module {
            path: path.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
