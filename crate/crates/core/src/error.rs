use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MosError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MosError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("adapter registry: {0}")]
    Registry(String),

    #[error("missing prototype for class {class} under adapter {adapter}")]
    MissingPrototype { adapter: usize, class: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<MosError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MosError {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        MosError::DimensionMismatch(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        MosError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        match self {
            e @ MosError::Stage { .. } => e,
            e => MosError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by the user's configuration rather than by a failure while running.
    pub fn is_config_error(&self) -> bool {
        match self {
            MosError::Config(_) | MosError::Json(_) => true,
            MosError::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
