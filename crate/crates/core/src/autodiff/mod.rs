//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! trainable leaves, every operation appends a node holding its output value
//! and whatever its backward rule needs, and [`Graph::backward`] walks the
//! arena in reverse accumulating gradients.
//!
//! ```
//! use amix_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
//! let r = g.relu(x).unwrap();
//! let loss = g.mean(r).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.5]);
//! ```

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, OpKind, Var};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape {shape:?} needs a different number of elements than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a single-element loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
}
