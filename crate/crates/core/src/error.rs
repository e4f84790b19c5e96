use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("non-finite activation after flow layer {layer} ({name})")]
    NumericOverflow { layer: usize, name: String },

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty {0}")]
    Empty(String),

    #[error("flow level {level} out of range (model has {levels} levels)")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("pixel value {value} of sample {index} outside [0, 1]")]
    PixelRange { index: usize, value: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint holds a {found}, expected a {expected}")]
    CheckpointKind { found: String, expected: String },

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("flow model not initialized; call initialize() with a data batch first")]
    Uninitialized,

    #[error("budget violation: {0}")]
    Budget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by invalid user input or configuration rather
    /// than a failure during computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape { .. }
                | Error::LabelOutOfRange { .. }
                | Error::LevelOutOfRange { .. }
                | Error::CheckpointKind { .. }
                | Error::Version { .. }
                | Error::Empty(_)
        )
    }
}
