use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum PrismError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("attention level has no unmasked keys")]
    EmptyKeys,

    #[error("degenerate pruning: every patch of image {image} was pruned at layer {layer}")]
    DegeneratePruning { image: char, layer: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("pose estimation failed: {0}")]
    NoPose(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing geometry for pair `{pair}` (expected gt.homog or gt.pose)")]
    MissingGeometry { pair: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint array `{name}` has shape {found}, model expects {expected}")]
    ShapeMismatch {
        name: String,
        found: String,
        expected: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PrismError>;
