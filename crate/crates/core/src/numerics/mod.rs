//! Dense row-major tensors and a small reverse-mode tape.
//!
//! Everything is generic over [`Real`] so the same model code runs in 32-bit
//! (the default for the pipeline) and 64-bit (used by gradient checks).

mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use ops::{gelu, gelu_scalar, layer_norm_rows, matmul, softmax, softmax_slice, std_normal_cdf};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point element type for tensors.
pub trait Real:
    num_traits::Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const BITS: u32;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
