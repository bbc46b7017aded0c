//! Synthesis, metrology and generative modeling of voxel polycrystals.

pub mod correlate;
pub mod error;
pub mod genmodel;
pub mod grains;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, FormatError, Result};
pub use scalar::Real;

/// Single-precision array.
pub type Tensor32 = tensor::NdArray<f32>;
/// Double-precision array.
pub type Tensor64 = tensor::NdArray<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
