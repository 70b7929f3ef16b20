//! Differentiable dense-tensor core: tensors, reverse-mode gradients, Adam,
//! matrix exponential, and spectral-norm clipping.

mod error;
mod linalg;
mod optim;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use linalg::{clip_spectral, matrix_exponential, spectral_norm};
pub use optim::{grad, AdamConfig, Bound, ParamId, ParamStore};
pub use tape::{sigmoid, tanh, CustomOp, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
