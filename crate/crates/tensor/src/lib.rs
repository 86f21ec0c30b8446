//! A small reverse-mode automatic differentiation engine for dense `f32`
//! NCHW tensors.
//!
//! The op set covers what a 2D U-shaped segmentation/registration network
//! needs: convolution, pooling, nearest upsampling, channel concatenation,
//! bilinear grid sampling, softmax/cross-entropy, and elementwise algebra.
//! Everything runs single-threaded on the CPU; matrix products go through
//! `matrixmultiply`.

mod error;
mod gemm;
mod graph;
mod ops;
mod optim;
mod param;
mod tensor;

pub use error::{Result, TensorError};
pub use gemm::sgemm;
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use optim::Adam;
pub use param::{kaiming_normal, Param, ParamId, ParamStore};
pub use tensor::Tensor;
