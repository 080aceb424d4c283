//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! The pipeline records every forward operation on a [`Graph`] tape and
//! differentiates with one reverse sweep. All math is `f64`; the same code
//! path serves gradient checking (double precision) and training.

mod check;
mod graph;
mod layers;
mod tensor;


pub use check::{grad_check, grad_check_single, GradCheckReport};
pub use graph::{GradientMap, Graph, NodeId, PROB_CLAMP};
pub use layers::{
    attention_weights, init_transformer_params, linear, multi_head_attention, transformer_layer,
    transformer_stack, BoundParams, ParamStore, TransformerDims,
};
pub use tensor::Tensor;

use thiserror::Error;

/// Structured failures raised by tape construction and backward passes.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op}: {rows}x{cols} shape does not fit {len} values")]
    BadShape {
        op: &'static str,
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("{op}: non-finite input value at index {index}")]
    NonFiniteInput { op: &'static str, index: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: [usize; 2] },
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("tensor belongs to a different graph")]
    ForeignGraph,
    #[error("parameter '{0}' registered twice")]
    DuplicateParam(String),
    #[error("parameter '{0}' not found")]
    UnknownParam(String),
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("column slice {start}+{len} out of range for {cols} columns")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        cols: usize,
    },
    #[error("softmax temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("target list length {got} does not match {expected} entries")]
    TargetLenMismatch { expected: usize, got: usize },
    #[error("{rows} rows cannot be grouped by {group}")]
    BadGrouping { rows: usize, group: usize },
    #[error("feature dim {dim} not divisible by {heads} heads")]
    BadHeadCount { dim: usize, heads: usize },
}
