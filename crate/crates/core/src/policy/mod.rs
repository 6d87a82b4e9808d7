//! The toy autoregressive policy: forward pass, sampling, exact gradients,
//! optimizers and checkpoints.

mod checkpoint;
mod grad;
mod model;
mod optim;

pub use checkpoint::{
    checksum, from_bytes, hex_digest, load_checkpoint, save_checkpoint, to_bytes, CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_MAGIC,
};
pub use grad::{backprop, evaluate_loss, Gradients, GrpoBatch, LossSpec, LossValue, SequenceRef};
pub use model::{
    context_window, greedy_completion, init_policy, next_token_dist, sample_completion, sequence_logprob,
    snapshot_reference, Completion, Distribution, PolicyConfig, PolicyParams, PositionTrace, ReferenceParams,
    SequenceTrace,
};
pub use optim::{optimizer_step, AdamHyper, LrSchedule, OptState, OptimizerMode};

use crate::objective::ObjectiveError;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(&'static str),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
