//! Time-series vision transformer for vibration fault diagnosis.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod counting;
pub mod data;
pub mod error;
mod fastmath;
pub mod features;
mod io;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use config::TsvitConfig;
pub use error::{Error, Result};
pub use train::TrainConfig;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::TsvitModel<f32>;
pub type Model64 = model::TsvitModel<f64>;
