//! Spatiotemporal traffic speed forecasting with a graph-masked transformer.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom fix the scalar to `f64`, which the CLI uses.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use graph::{build_khop_mask, KHopMask, SensorGraph};
pub use model::{build_variant, ModelConfig, ParameterSet, Pipeline, Variant};
pub use scalar::Scalar;
pub use tensor::{Matrix, Tensor3};

pub type Matrix64 = Matrix<f64>;
pub type Tensor64 = Tensor3<f64>;
pub type ParameterSet64 = ParameterSet<f64>;
pub type FeatureTensor64 = dataset::FeatureTensor<f64>;
