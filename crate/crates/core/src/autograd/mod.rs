//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records operations on [`Tensor`] values and replays them in
//! reverse once. Argmax reductions break ties toward the lowest flat index.

mod conv;
pub mod fd;
mod gemm;
mod graph;
mod optim;
mod tensor;

use thiserror::Error;

pub use conv::{conv_output_extent, ConvGeometry};
pub use graph::{
    ActivationKind, Axis, CustomBackward, ElementwiseKind, GradientRecord, Graph, ParamId,
    ReduceKind, Var, LOG_FLOOR,
};
pub use optim::{Params, Sgd};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("matmul inner extents disagree: {lhs:?} · {rhs:?}")]
    InnerExtent { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("stride must be positive")]
    InvalidStride,
    #[error("kernel extent {kernel} exceeds padded input extent {padded_extent}")]
    KernelTooLarge { kernel: usize, padded_extent: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("reduction over an empty extent")]
    EmptyReduction,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("graph already consumed by a reverse pass")]
    GraphConsumed,
    #[error("invalid {name}: {value}")]
    InvalidHyperParameter { name: &'static str, value: f64 },
}
