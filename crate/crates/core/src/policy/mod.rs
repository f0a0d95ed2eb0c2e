//! Toy causal language model used as the policy, plus its tokenizer and
//! checkpoint format.

mod checkpoint;
mod model;
mod tokenizer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC,
};
pub use model::{
    avg_loglik, forward_logits, token_prob_trace, BoundModel, ModelConfig, Param, PolicyModel, ResponseEval,
    TokenProbTrace,
};
pub use tokenizer::Tokenizer;

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("input of {len} tokens exceeds the context window of {window}")]
    InputTooLong { len: usize, window: usize },
    #[error("response must contain at least one token")]
    EmptyResponse,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
