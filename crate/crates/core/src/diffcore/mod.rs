//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations as they are evaluated; [`Graph::backward`]
//! sweeps the tape once in reverse and returns gradients for every node.
//! The op set is what Koopman identification and policy training need:
//! dense algebra, elementwise activations, 1-D convolution, linear
//! interpolation, an input-affine linear recurrence and constant linear maps.
//!
//! Subgradients at kinks are zero: `d|x|/dx = 0` and `d relu/dx = 0` at `x = 0`.

mod graph;
mod kernels;
mod optim;
mod tensor;

use rand::Rng;
use thiserror::Error;

pub use graph::{Gradients, Graph, LinearMap, Var};
pub use kernels::{
    conv1d_backward, conv1d_forward, linear_interpolate, same_padding, InterpPlan,
};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;

pub(crate) use graph::{input_gain, recurrence_step};
pub(crate) use tensor::dot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("numeric fault at node {node}: {what}")]
    NumericFault { node: usize, what: String },
    #[error("shape error: {0}")]
    Shape(String),
}

/// Uniform initialization in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}
