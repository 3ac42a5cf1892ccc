//! Memory-augmented multimodal transformer agent for instruction-following
//! navigation on procedurally generated graph worlds.

pub mod autograd;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// The f64 tensor used throughout the model.
pub type Tensor = autograd::Tensor<f64>;
pub type TensorF32 = autograd::Tensor<f32>;
