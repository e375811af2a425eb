use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("font source has no glyph for U+{0:04X}")]
    MissingGlyph(u32),
    #[error("unreadable source {path}: {reason}")]
    UnreadableSource { path: PathBuf, reason: String },
    #[error("bad split ratio: {0}")]
    BadRatio(String),
    #[error("reference pool is empty")]
    EmptyReferencePool,
    #[error("U+{0:04X} is not in the structure table")]
    UnknownCharacter(u32),
    #[error("grid {h}x{w} is too small for {category}")]
    GridTooSmall { category: String, h: usize, w: usize },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("at least one reference glyph is required")]
    EmptyReferences,
    #[error("index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: u32, size: usize },
    #[error("non-finite loss at iteration {0}")]
    DivergenceDetected(usize),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("missing ground truth for {font_id} U+{codepoint:04X}")]
    MissingGroundTruth { font_id: String, codepoint: u32 },
    #[error("perceptual extractor unavailable")]
    ExtractorUnavailable,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("run directory {0} is locked by another process")]
    RunDirLocked(PathBuf),
    #[error("{0} already exists; run directories are append-only")]
    ArtifactExists(PathBuf),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[cfg(feature = "backend")]
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[cfg(feature = "backend")]
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingGlyph(_) => "MISSING_GLYPH",
            Error::UnreadableSource { .. } => "UNREADABLE_SOURCE",
            Error::BadRatio(_) => "BAD_RATIO",
            Error::EmptyReferencePool => "EMPTY_REFERENCE_POOL",
            Error::UnknownCharacter(_) => "UNKNOWN_CHARACTER",
            Error::GridTooSmall { .. } => "GRID_TOO_SMALL",
            Error::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            Error::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            Error::LayoutMismatch(_) => "LAYOUT_MISMATCH",
            Error::EmptyReferences => "EMPTY_REFERENCES",
            Error::IndexOutOfRange { .. } => "INDEX_OUT_OF_RANGE",
            Error::DivergenceDetected(_) => "DIVERGENCE_DETECTED",
            Error::MissingCheckpoint(_) => "MISSING_CHECKPOINT",
            Error::MissingGroundTruth { .. } => "MISSING_GROUND_TRUTH",
            Error::ExtractorUnavailable => "EXTRACTOR_UNAVAILABLE",
            Error::EmptyDataset => "EMPTY_DATASET",
            Error::Config(_) => "CONFIG_ERROR",
            Error::RunDirLocked(_) => "RUN_DIR_LOCKED",
            Error::ArtifactExists(_) => "ARTIFACT_EXISTS",
            Error::Unsupported(_) => "UNSUPPORTED",
            #[cfg(feature = "backend")]
            Error::Candle(_) => "TENSOR_ERROR",
            Error::Io(_) => "IO_ERROR",
            #[cfg(feature = "backend")]
            Error::Image(_) => "IMAGE_ERROR",
            Error::Json(_) => "JSON_ERROR",
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
