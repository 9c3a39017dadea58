//! Minimal dense tensors, NCHW convolution kernels and a reverse-mode tape.
//!
//! Everything runs single-threaded in a fixed order, so a computation gives
//! bit-identical results for identical inputs.

pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use optim::{clip_grad_norm, Adam, Sgd};
pub use params::{he_uniform, Bound, Conv2d, Linear, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
