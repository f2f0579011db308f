//! Transformer encoder with hand-written backward passes.

mod encoder;
pub mod ops;
mod params;

pub use encoder::{
    total_loss, Encoder, ForwardOutput, HeadConfig, ModelConfig, Objectives, PretrainLoss, Tape,
};
pub use params::{Gradients, Param, ParamId, ParamStore, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("token id {id} outside vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("sequence of {len} exceeds {max} positions")]
    PositionOutOfRange { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no masked positions")]
    EmptyMaskSet,
    #[error("model has no classification head")]
    UntrainedHead,
    #[error("label {0} out of range")]
    BadLabel(usize),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}
