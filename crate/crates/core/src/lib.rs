//! Segmentation learned without images, from category names and artificial token maps.
//!
//! Category words are turned into artificial image-token maps, a small
//! encoder-decoder learns to segment them, and at inference the per-position
//! category probabilities can be smoothed over a cosine KNN graph of backbone
//! features before evaluation with mIoU.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root name the concrete instantiations.

pub mod artgen;
pub mod backbone;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod pnm;
pub mod postproc;
pub mod rng;
pub mod scalar;
pub mod segpipe;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ModelParamsF32 = model::ModelParams<f32>;
pub type ModelParamsF64 = model::ModelParams<f64>;
pub type EmbeddingMatrixF32 = vocab::EmbeddingMatrix<f32>;
pub type EmbeddingMatrixF64 = vocab::EmbeddingMatrix<f64>;
pub type ProbabilityMapF32 = segpipe::ProbabilityMap<f32>;
pub type ProbabilityMapF64 = segpipe::ProbabilityMap<f64>;
pub type FeatureMapF32 = backbone::FeatureMap<f32>;
pub type FeatureMapF64 = backbone::FeatureMap<f64>;
pub type PipelineF32 = pipeline::Pipeline<f32>;
pub type PipelineF64 = pipeline::Pipeline<f64>;
