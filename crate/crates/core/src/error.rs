use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset root is missing files or records for a sample.
    #[error("ingestion error for `{id}`: {reason}")]
    Ingestion { id: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid synthetic-data or experiment specification.
    #[error("spec error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    /// The model lacks a structural feature an operation needs.
    #[error("capability error: {0}")]
    Capability(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite loss at step {step} (batch ids: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("feedback error: {0}")]
    Feedback(String),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}

/// Per-sample metric failures. These are counted and excluded from dataset
/// means rather than zero-filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricError {
    #[error("degenerate dice: both masks empty")]
    DegenerateDice,
    #[error("empty foreground")]
    EmptyForeground,
    #[error("empty background")]
    EmptyBackground,
    #[error("zero saliency")]
    ZeroSaliency,
    #[error("shape mismatch")]
    ShapeMismatch,
}
