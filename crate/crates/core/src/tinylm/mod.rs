//! A small Llama-style decoder trained from scratch on CPU.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod params;
pub mod schedule;
pub mod train;

use thiserror::Error;

pub use checkpoint::{CheckpointError, ExpertCheckpoint, LineageEntry};
pub use config::{ExpertConfig, ReferenceModel};
pub use model::{forward, log_softmax, loss_and_grad, Logits};
pub use params::{init_model, ModelParams, ParamLayout, Scalar, TensorKind, TensorSpec};
pub use schedule::{lr_at, TrainSchedule};
pub use train::{train, Adam, TrainError, TrainOutcome};

use crate::corpus::TokenId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training schedule: {0}")]
    InvalidSchedule(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence of {len} tokens exceeds the model's {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequences in a batch must have equal length")]
    RaggedBatch,
    #[error("parameter vector has {actual} elements, config needs {expected}")]
    ParamCount { expected: usize, actual: usize },
    #[error("non-finite loss{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { step: Option<usize> },
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
}

/// Log-probabilities of the token following `context`.
pub fn next_token_logprobs(
    checkpoint: &ExpertCheckpoint,
    context: &[TokenId],
) -> Result<Vec<f64>, ModelError> {
    let logits = forward(checkpoint.config(), checkpoint.params(), &[context.to_vec()])?;
    Ok(log_softmax(logits.row(0, context.len() - 1)))
}

/// Row `t` holds `log p(· | tokens[..=t])`; one forward pass.
pub fn prefix_logprobs(
    checkpoint: &ExpertCheckpoint,
    tokens: &[TokenId],
) -> Result<Vec<Vec<f64>>, ModelError> {
    let logits = forward(checkpoint.config(), checkpoint.params(), &[tokens.to_vec()])?;
    Ok((0..tokens.len()).map(|t| log_softmax(logits.row(0, t))).collect())
}
