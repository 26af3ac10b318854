//! A compact reverse-mode autodiff engine with the handful of layers needed
//! by convolutional diffusion models and small image classifiers.
//!
//! Everything is generic over [`Scalar`] (`f32` for training throughput,
//! `f64` for gradient checking).

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod layers;
mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, Embedding, GroupNorm, LayerNorm, Linear};
pub use optim::{clip_grad_norm, AdamW, Ema};
pub use params::{Init, ParamBuilder, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
