//! Prompt construction for the two inference strategies.

use serde::{Deserialize, Serialize};

use crate::records::TaskInstance;
use crate::vocab::{TokenId, Vocab, VocabError};

/// Compact system instruction prepended under the `cot` strategy: reason
/// inside think tags, then answer inside answer tags.
pub const SYSTEM_PREAMBLE: [&str; 3] = ["reason", "then", "answer"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No preamble; a bare letter is accepted as the answer.
    Direct,
    /// Preamble plus prompt; only tagged answers count.
    #[default]
    Cot,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::Cot => "cot",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Strategy::Direct),
            "cot" => Ok(Strategy::Cot),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

pub fn build_prompt(vocab: &Vocab, task: &TaskInstance, strategy: Strategy) -> Result<Vec<TokenId>, VocabError> {
    let mut out = Vec::new();
    if strategy == Strategy::Cot {
        for w in SYSTEM_PREAMBLE {
            out.push(vocab.id(w).ok_or_else(|| VocabError::UnknownToken(w.to_string()))?);
        }
    }
    out.extend(task.prompt_tokens(vocab)?);
    Ok(out)
}
