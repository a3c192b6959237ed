//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgedgError {
    #[error("invalid age {age}: expected a value in [18, 85]")]
    AgeOutOfRange { age: f64 },

    #[error("manifest {path}, row {row}: {message}")]
    Manifest {
        path: String,
        row: usize,
        message: String,
    },

    #[error("duplicate sample id {id:?}")]
    DuplicateId { id: String },

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("degenerate variance in {context}: correlation undefined (denominator {value:.3e} <= {threshold:.0e})")]
    DegenerateVariance {
        context: String,
        value: f64,
        threshold: f64,
    },

    #[error("domain {domain} has no samples in the {split} split")]
    EmptyDomain { domain: String, split: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("records file error: {0}")]
    Records(String),

    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AgedgError>;

impl AgedgError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AgedgError::Io {
            path: path.into(),
            source,
        }
    }
}
