use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: unsupported {property}")]
    Format { path: PathBuf, property: String },

    #[error("label {value} at (x={x}, y={y}) is outside 0..{num_classes} and not IGNORE")]
    LabelRange {
        x: usize,
        y: usize,
        value: u8,
        num_classes: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("ground truth has no valid pixels")]
    EmptyGroundTruth,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
