//! Minimal dense tensor math with reverse-mode automatic differentiation.

pub mod checkpoint;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, Checkpoint, CheckpointMeta, RngState};
pub use optim::{adamw_update, clip_grad_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
