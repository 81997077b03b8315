//! Dense `f32` tensors, a reverse-mode tape with finite-difference checks,
//! Adam and a couple of layers.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use adam::{Adam, Param};
pub use error::TensorError;
pub use graph::{BatchStats, Graph, Var, BATCHNORM_EPS};
pub use tensor::Tensor;
