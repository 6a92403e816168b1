//! Dense `f64` tensors, a reverse-mode autodiff tape, and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use gradcheck::{
    check_op_gradients, grad_check, relative_error, GradCheckReport, Objective, REL_ERR_FLOOR,
};
pub use graph::{log_sigmoid, sigmoid, Fault, Gradients, Graph, Var, PROB_CLAMP};
pub use tensor::Tensor;

/// Named parameter tensors, iterated in key order.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Flat gradients keyed like a [`ParamMap`].
pub type GradMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a single-element loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
