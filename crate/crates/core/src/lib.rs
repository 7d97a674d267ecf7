pub mod artifacts;
pub mod collab;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod emb;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod generator;
pub mod optim;
pub mod pca;
pub mod pipeline;
pub mod rqvae;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations used by the pipeline.
pub type RqVaeModel = rqvae::RqVae<f32>;
pub type GeneratorModel = generator::Generator<f32>;
pub type CollabModel = collab::CollabEmbeddings<f32>;
pub type FusionWeights = fusion::FusionParams<f32>;
