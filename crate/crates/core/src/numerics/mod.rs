//! Reverse-mode differentiable tensor engine, parameter storage and Adam.

mod gradcheck;
mod gru;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_fn, numeric_gradient};
pub use optim::{lr_decay, AdamConfig, AdamState};
pub use params::{init_uniform, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("loss is not deterministic: {first} then {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
    #[error("empty input sequence")]
    EmptySequence,
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Self::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
