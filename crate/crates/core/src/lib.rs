//! Hybrid CNN+GRU binary image classification pipeline: dataset ingestion
//! and augmentation, three desk-scale hybrid architectures trained from a
//! minimal reverse-mode kernel, Gaussian-process Bayesian hyperparameter
//! optimization, deep-ensemble uncertainty quantification, and sum-rule
//! score fusion with a full evaluation suite.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! f32 or f64): training and checkpoints run in f32, oracle tests and GP
//! math in f64. Concrete aliases are exported below.

pub mod augment;
pub mod bayes;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod formats;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use models::ArchId;
pub use scalar::Scalar;

/// f32 tensor, the training/checkpoint precision.
pub type Tensor32 = nn::Tensor<f32>;
/// f64 tensor, the oracle/metrics precision.
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
pub type Ensemble32 = ensemble::Ensemble<f32>;
pub type Ensemble64 = ensemble::Ensemble<f64>;
