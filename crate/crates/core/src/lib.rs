//! Adversarial affect estimation with conditioned latent features.
//!
//! A denoising autoencoder (G) and a quadrant-aware discriminator (D) produce
//! per-frame `zq` features; a combiner (C) turns them into valence/arousal
//! estimates, either frame by frame or with an LSTM and optional attention over
//! its previous states.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the usual `f64` choice.

pub mod attention;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use metrics::{AffectLabel, MetricReport};
pub use model::{AnclafModel, Architecture, Variant};
pub use scalar::Scalar;
pub use train::{StagePlan, StageResult, TrainConfig};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Model64 = model::AnclafModel<f64>;
pub type Checkpoint64 = io::Checkpoint<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type Model32 = model::AnclafModel<f32>;
