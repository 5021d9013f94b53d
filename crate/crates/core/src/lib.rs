//! Dermoscopy lesion classification pipeline.
//!
//! Builds balanced training sets from a seven-class lesion corpus, pretrains
//! a dense encoder / upsampling decoder on segmentation masks, fine-tunes
//! the encoder for classification, and combines the resulting classifiers
//! with per-class true-positive-rate weights.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the concrete types the pipeline runs with.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod sampler;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used for network training and inference.
pub type TrainScalar = f32;
/// Scalar used for ensemble scoring and reported metrics.
pub type ScoreScalar = f64;

/// Segmentation model at the training scalar type.
pub type SegNet = nets::SegModel<TrainScalar>;
/// Classification model at the training scalar type.
pub type ClsNet = nets::ClsModel<TrainScalar>;
/// Stroke classifier at the training scalar type.
pub type HairClassifier = nets::HairNet<TrainScalar>;
/// Probability tensor at the scoring scalar type.
pub type Probabilities = ensemble::ProbabilityTensor<ScoreScalar>;
/// Weight matrix at the scoring scalar type.
pub type Weights = ensemble::WeightMatrix<ScoreScalar>;
