//! Training loops: group-relative RL and supervised fine-tuning.

mod rlt;
mod sft;

pub use rlt::*;
pub use sft::*;

use std::path::PathBuf;

use crate::policy::PolicyError;
use crate::prompting::{build_prompt, Strategy};
use crate::records::{DatasetRecord, TaskInstance};
use crate::vocab::{TokenId, Vocab, VocabError};

#[derive(Debug, thiserror::Error)]
pub enum TunerError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("record {0} has no rationale")]
    MissingCot(String),
    #[error("record {id}: {reason}")]
    InvalidCot { id: String, reason: String },
    #[error("no training tasks")]
    EmptyDataset,
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A task with its prompt already tokenized for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTask {
    pub task: TaskInstance,
    pub prompt: Vec<TokenId>,
}

pub fn prepare_tasks(
    records: &[DatasetRecord],
    vocab: &Vocab,
    strategy: Strategy,
) -> Result<Vec<PreparedTask>, VocabError> {
    records
        .iter()
        .map(|r| {
            Ok(PreparedTask {
                prompt: build_prompt(vocab, &r.task, strategy)?,
                task: r.task.clone(),
            })
        })
        .collect()
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> TunerError + '_ {
    move |source| TunerError::Io { path: path.to_path_buf(), source }
}

#[cfg(test)]
mod tests;
