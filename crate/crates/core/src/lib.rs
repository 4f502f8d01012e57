//! Metric-learning-assisted domain adaptation at desk scale.
//!
//! A feature extractor is trained jointly with a classifier, an
//! adversarial domain discriminator (through a gradient reversal layer)
//! and a metric generator whose batch-hard triplet loss uses per-class
//! margins that grow with the target predictions' second-largest
//! probability. Everything runs on a small reverse-mode autodiff engine
//! over dense `f64` matrices.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod losses;
pub mod networks;
pub mod robustness;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
