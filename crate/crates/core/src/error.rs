use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DamError {
    #[error("singular transform: |det| = {det:e} is below the singularity threshold")]
    SingularTransform { det: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mask weights at ({row}, {col}) sum to {sum}, expected 1")]
    MaskNotNormalized { row: usize, col: usize, sum: f64 },

    #[error("pyramid with {levels} levels would shrink a {height}x{width} grid below 2 pixels")]
    TooManyLevels {
        levels: usize,
        height: usize,
        width: usize,
    },

    #[error("anchor set has no root anchor")]
    MissingRoot,

    #[error("index {index} out of range for {len} intermediate anchors")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("motion leaves the frame: {0}")]
    MotionOutOfFrame(String),

    #[error("foreground mask is empty")]
    EmptyForeground,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl DamError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DamError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DamError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DamError>;
