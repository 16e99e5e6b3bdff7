//! Low-rank adapter training with per-sample quality weighting and
//! sensitivity-driven rank re-allocation, on a small f64 MLP.
//!
//! The pipeline: score every training sample ([`quality`]), sample
//! minibatches from a softmax over the scores, track per-layer sensitivity of
//! the frozen weights ([`sensitivity`]) and periodically redistribute adapter
//! rank across layers ([`allocator`]). [`trainer::run`] ties it together.

pub mod adapters;
pub mod allocator;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod quality;
pub mod sensitivity;
pub mod trainer;

pub use adapters::{LoraAdapter, RankChange};
pub use allocator::{allocate, phi, AllocatorConfig, RankPlan};
pub use data::{gen_gaussian_mixture, Dataset};
pub use error::{Error, Result};
pub use model::{Activation, AdapterGrads, Batch, ModelSpec, ModelState};
pub use numerics::{GradTape, Tensor};
pub use quality::{DataSubset, QualityConfig, QualityRecord};
pub use sensitivity::{Estimator, SensitivityStats};
pub use trainer::{ablate, evaluate, run, run_with, Metric, TrainConfig, TrainReport};
