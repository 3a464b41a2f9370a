//! Minimal dense tensor engine with reverse-mode gradients.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Graph`] and differentiated with [`Graph::backward`]. Training runs in
//! `f32`; the same ops instantiate at `f64` for finite-difference checks.

mod error;
mod graph;
mod kernels;
mod real;
mod tensor;

pub mod gradcheck;
pub mod io;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{
    BackwardFn, BinaryKind, Graph, NormMode, PointwiseKind, PoolKind, RunningStats, Var, NORM_EPS,
    NORM_MOMENTUM,
};
pub use io::TensorArchive;
pub use real::Real;
pub use tensor::Tensor;
