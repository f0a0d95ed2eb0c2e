//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape rebuilt for every training step. Ops
//! broadcast only between identical shapes or a single-element operand and
//! anything else. A [`Graph`] is confined to one thread; separate graphs are
//! independent.

mod finite_diff;
mod graph;

pub use finite_diff::{finite_difference_grad, FiniteDiffError};
pub use graph::{Gradients, Graph, NodeId, OpKind, Tensor};
pub(crate) use graph::{log_sigmoid_scalar, sigmoid_scalar};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: non-finite input at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward root must hold a single element, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("leaf of shape {shape:?} given {len} values")]
    LeafSize { shape: Vec<usize>, len: usize },
}
