//! Parameter storage and the layers the networks are assembled from.

mod affine;
mod lstm;
mod store;

pub use affine::{Activation, AffineLayer, DecoderStack, EncoderStack};
pub use lstm::{lstm_step, lstm_unroll, LstmCell, LstmState, Unrolled};
pub use store::{glorot_bound, init_params, ParamId, ParamInit, ParamSpec, ParamStore};

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer dimensions must be positive, got {0:?}")]
    NonPositive(Vec<usize>),
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("empty sequence")]
    EmptySequence,
}
