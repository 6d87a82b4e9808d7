//! Closed whitespace vocabulary with the tag literals pinned to fixed ids.
//!
//! Ids 0..=5 are always `<think>`, `</think>`, `<answer>`, `</answer>`,
//! `<eos>`, `<pad>`, in that order. User tokens follow in the order given
//! to [`build_vocab`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Index of a token in a [`Vocab`].
pub type TokenId = u32;

pub const THINK_OPEN: TokenId = 0;
pub const THINK_CLOSE: TokenId = 1;
pub const ANSWER_OPEN: TokenId = 2;
pub const ANSWER_CLOSE: TokenId = 3;
pub const EOS: TokenId = 4;
pub const PAD: TokenId = 5;

/// Number of reserved ids at the start of every vocabulary.
pub const NUM_RESERVED: usize = 6;

/// Reserved literals, indexed by id.
pub const RESERVED: [&str; NUM_RESERVED] =
    ["<think>", "</think>", "<answer>", "</answer>", "<eos>", "<pad>"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("token {0:?} collides with a reserved literal")]
    ReservedCollision(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    UnknownId(TokenId),
    #[error("token {0:?} is empty or contains whitespace")]
    InvalidToken(String),
}

/// Returns true for the four tag tokens.
pub fn is_tag(id: TokenId) -> bool {
    id <= ANSWER_CLOSE
}

/// Returns true for any of the six reserved ids.
pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < NUM_RESERVED
}

/// Bijective token string <-> id mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

/// Builds a vocabulary from user tokens, placing the reserved literals first.
pub fn build_vocab<S: AsRef<str>>(token_strings: &[S]) -> Result<Vocab, VocabError> {
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut index: HashMap<String, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    for tok in token_strings {
        let tok = tok.as_ref();
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(VocabError::InvalidToken(tok.to_string()));
        }
        match index.get(tok) {
            Some(&id) if is_reserved(id) => {
                return Err(VocabError::ReservedCollision(tok.to_string()))
            }
            Some(_) => return Err(VocabError::DuplicateToken(tok.to_string())),
            None => {}
        }
        index.insert(tok.to_string(), tokens.len() as TokenId);
        tokens.push(tok.to_string());
    }
    Ok(Vocab { tokens, index })
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// A vocabulary always holds the reserved tokens, so this is never true.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// User tokens in id order (everything after the reserved block).
    pub fn user_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// Splits on single spaces and maps every word to its id.
    ///
    /// The empty string encodes to the empty sequence.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(' ')
            .map(|w| self.id(w).ok_or_else(|| VocabError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, VocabError> {
        let words = tokens
            .iter()
            .map(|&t| self.token(t).ok_or(VocabError::UnknownId(t)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    /// Word strings for a token slice; out-of-range ids are an error.
    pub fn words<'a>(&'a self, tokens: &[TokenId]) -> Result<Vec<&'a str>, VocabError> {
        tokens
            .iter()
            .map(|&t| self.token(t).ok_or(VocabError::UnknownId(t)))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = VocabError;

    fn try_from(all: Vec<String>) -> Result<Self, Self::Error> {
        let user = match all.get(..NUM_RESERVED) {
            Some(head) if head.iter().zip(RESERVED).all(|(a, b)| a == b) => &all[NUM_RESERVED..],
            _ => &all[..],
        };
        build_vocab(user)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Collapses runs of whitespace and pads tag literals so they split as
/// words, e.g. `"</think><answer>"` becomes `"</think> <answer>"`.
pub fn normalize_spacing(text: &str) -> String {
    let mut padded = text.to_string();
    for tag in &RESERVED[..4] {
        padded = padded.replace(tag, &format!(" {tag} "));
    }
    padded.split_whitespace().collect::<Vec<_>>().join(" ")
}
