//! Dense arrays, a define-by-run reverse-mode graph, an Adam optimizer and
//! the seeded random source everything else builds on.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;

pub use array::DenseArray;
pub(crate) use array::gemm;
pub(crate) use graph::column_moments;
pub use gradcheck::{central_difference, grad_check};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, SeededRng};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar loss, node {node} has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}
