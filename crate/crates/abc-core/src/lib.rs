//! Binary-CNN engine: weights approximated by linear combinations of binary
//! bases, activations binarized through banks of trainable thresholds, and
//! inference executed as bit-packed xnor/popcount convolutions.

pub mod activation;
pub mod approx;
pub mod bitconv;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod infer;
mod io;
pub mod layers;
pub mod model;
pub(crate) mod parallel;
pub mod tensor;
pub mod train;

pub use activation::ActivationBank;
pub use approx::{ApproxMode, WeightBaseSet, DEFAULT_RIDGE_LAMBDA};
pub use bitconv::{BitPlane, FoldedThreshold};
pub use config::{LayerSpec, ModelSpec, RunConfig, TrainConfig};
pub use cost::CostReport;
pub use data::Dataset;
pub use error::{Error, Result};
pub use infer::EvalReport;
pub use model::Model;
pub use tensor::{Rng, Tensor};
pub use train::TrainLog;
