//! Dense-tensor numerics: the value type, the reverse-mode tape, and a
//! finite-difference gradient checker. Only what the attention stack needs.

mod gradcheck;
mod graph;
pub mod par;
mod scalar;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{AttrParamVars, EmbedEntry, EmbedSpec, Gradients, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
