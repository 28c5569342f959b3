//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference verification); the aliases below fix the common choices.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{clip_grad_norm, cosine_lr, global_norm, AdamW, AdamWConfig, GradMap};
pub use params::{kaiming_uniform, BoundParams, ParamStore, CHECKPOINT_MAGIC};
pub use scalar::Scalar;
pub use tape::{sigmoid, FocalParams, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
