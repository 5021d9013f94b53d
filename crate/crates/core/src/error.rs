//! Error type shared across the pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(
        "ground truth row for '{id}' has {positives} positive indicators (expected exactly 1)"
    )]
    BadGroundTruthRow { id: String, positives: usize },

    #[error("duplicate record id '{0}'")]
    DuplicateId(String),

    #[error("no image file found for id '{id}' under {root}")]
    MissingImage { id: String, root: PathBuf },

    #[error("image '{id}' has no paired mask file")]
    MissingMask { id: String },

    #[error("mask for '{id}' is {mask_h}x{mask_w} but image is {img_h}x{img_w}")]
    MaskDimMismatch {
        id: String,
        img_h: usize,
        img_w: usize,
        mask_h: usize,
        mask_w: usize,
    },

    #[error("record '{0}' has no class label")]
    UnlabeledRecord(String),

    #[error("record '{0}' has no hair flag")]
    MissingHairFlag(String),

    #[error("unknown class code '{0}'")]
    UnknownClassCode(String),

    #[error("class index {0} out of range 0..7")]
    ClassIndexOutOfRange(usize),

    #[error("empty raster")]
    EmptyRaster,

    #[error("expected a square raster, got {h}x{w}")]
    NonSquare { h: usize, w: usize },

    #[error("invalid target side {0}")]
    BadSide(usize),

    #[error("invalid synthetic spec: {0}")]
    BadSynthSpec(String),

    #[error("invalid encoder spec: {0}")]
    BadEncoderSpec(String),

    #[error("input side {side} must be divisible by {required}")]
    IndivisibleSide { side: usize, required: usize },

    #[error("hair model has not been trained")]
    UntrainedModel,

    #[error("encoder spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("truth and prediction lists differ in length ({truth} vs {pred})")]
    LengthMismatch { truth: usize, pred: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("confusion matrix has no samples; metrics are undefined")]
    EmptyConfusion,

    #[error("invalid probability tensor: {0}")]
    BadProbabilities(String),

    #[error("invalid weight matrix: {0}")]
    BadWeights(String),

    #[error("weighted score denominator is zero for image {image}")]
    ZeroDenominator { image: String },

    #[error("anchor class {0} has no training records")]
    EmptyAnchor(String),

    #[error("number of balanced sets must be >= 1")]
    NoSets,

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: u32, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pipeline config error: {0}")]
    Config(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("run manifest incomplete: stage '{0}' has not finished")]
    IncompleteRun(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
