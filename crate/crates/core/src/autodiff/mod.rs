//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is real-valued; complex quantities travel as a trailing
//! axis of size 2 holding the real and imaginary parts. A [`Graph`] in
//! [`GradMode::Differentiable`] records its own backward pass, which is how
//! input gradients (and penalties built from them) are differentiated with
//! respect to parameters.

mod conv;
mod graph;
mod optim;
mod real;
mod tensor;

use thiserror::Error;

pub use conv::{conv_forward, conv_input_adjoint, conv_kernel_adjoint, ConvGeom, Padding};
pub use graph::{GradMode, Graph, Var};
pub use optim::OptimizerState;
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not describe {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    DimMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },
    #[error("{op}: rank mismatch: expected {expected}, found {found}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("kernel extent {kernel} exceeds padded input extent {input} on axis {axis}")]
    KernelTooLarge {
        axis: usize,
        kernel: usize,
        input: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("concat needs at least one tensor")]
    EmptyConcat,
    #[error("layer_norm over zero elements")]
    EmptyNormalization,
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("input gradients need a graph built in differentiable mode (GradMode::Differentiable)")]
    NotDifferentiable,
    #[error("non-finite gradient for parameter `{name}` (first bad entry at {index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
