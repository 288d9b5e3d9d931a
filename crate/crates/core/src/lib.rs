//! Semantic segmentation with an auxiliary signed-distance regression head.
//!
//! The crate covers the full pipeline: label rasters and their binary
//! formats ([`raster`]), exact Euclidean distance transforms ([`edt`]), a
//! small convolutional network with hand-written gradients ([`network`]),
//! the training loop ([`trainer`]) and segmentation metrics ([`metrics`]).
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod edt;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use real::Real;
pub use tensor::{ShapeError, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = network::NetworkState<f32>;
pub type Network64 = network::NetworkState<f64>;
pub type FieldStack32 = raster::FieldStack<f32>;
pub type FieldStack64 = raster::FieldStack<f64>;
pub type Dataset32 = trainer::Dataset<f32>;
pub type Dataset64 = trainer::Dataset<f64>;
