//! Multiple-choice task records and their JSONL persistence.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::reward::parse_tagged_text;
use crate::vocab::{TokenId, Vocab, VocabError};

/// Option label; `Letter(0)` is `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Letter(u8);

impl Letter {
    pub const A: Letter = Letter(0);

    pub fn from_index(i: usize) -> Option<Letter> {
        (i < 26).then_some(Letter(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Letter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.as_bytes() {
            [c @ b'A'..=b'Z'] => Ok(Letter(c - b'A')),
            _ => Err(format!("not a choice letter: {s:?}")),
        }
    }
}

impl From<Letter> for String {
    fn from(l: Letter) -> Self {
        l.to_string()
    }
}

impl TryFrom<String> for Letter {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IidTest,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::IidTest, Split::OodTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::IidTest => "iid_test",
            Split::OodTest => "ood_test",
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "iid_test" => Ok(Split::IidTest),
            "ood_test" => Ok(Split::OodTest),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Choice {
    pub letter: Letter,
    pub text: String,
}

/// One multiple-choice question. Prompt and choice texts are space-separated
/// words; [`TaskInstance::prompt_tokens`] maps them through a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: String,
    pub prompt: String,
    pub choices: Vec<Choice>,
    pub gold: Letter,
    pub family: String,
    pub split: Split,
    pub shortcut_letter: Option<Letter>,
}

impl TaskInstance {
    pub fn prompt_tokens(&self, vocab: &Vocab) -> Result<Vec<TokenId>, VocabError> {
        vocab.encode(&self.prompt)
    }

    pub fn choice_text(&self, letter: Letter) -> Option<&str> {
        self.choices
            .iter()
            .find(|c| c.letter == letter)
            .map(|c| c.text.as_str())
    }

    pub fn gold_text(&self) -> &str {
        self.choice_text(self.gold).unwrap_or("")
    }

    /// Checks the structural invariants, returning the offending field name.
    pub fn check(&self) -> Result<(), &'static str> {
        if self.id.is_empty() {
            return Err("id");
        }
        if self.prompt.split_whitespace().next().is_none() {
            return Err("prompt");
        }
        let n = self.choices.len();
        if !(2..=4).contains(&n) {
            return Err("choices");
        }
        if self
            .choices
            .iter()
            .enumerate()
            .any(|(i, c)| c.letter.index() != i || c.text.trim().is_empty())
        {
            return Err("choices");
        }
        if self.gold.index() >= n {
            return Err("gold");
        }
        if self.shortcut_letter.is_some_and(|l| l.index() >= n) {
            return Err("shortcut_letter");
        }
        Ok(())
    }
}

/// A task plus its optional rationale and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub task: TaskInstance,
    pub cot: Option<String>,
    pub provenance: String,
}

impl DatasetRecord {
    pub fn check(&self) -> Result<(), &'static str> {
        self.task.check()?;
        if let Some(cot) = &self.cot {
            if !parse_tagged_text(cot).well_formed {
                return Err("cot");
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("line {line}: invalid JSON: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: bad field {field:?}")]
    SchemaError { line: usize, field: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize)]
struct WireRecord<'a> {
    id: &'a str,
    prompt: &'a str,
    choices: Map<String, Value>,
    gold: String,
    family: &'a str,
    split: Split,
    shortcut_letter: Option<String>,
    cot: Option<&'a str>,
    provenance: &'a str,
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_json(r: &DatasetRecord) -> String {
    let choices = r
        .task
        .choices
        .iter()
        .map(|c| (c.letter.to_string(), Value::String(c.text.clone())))
        .collect();
    let wire = WireRecord {
        id: &r.task.id,
        prompt: &r.task.prompt,
        choices,
        gold: r.task.gold.to_string(),
        family: &r.task.family,
        split: r.task.split,
        shortcut_letter: r.task.shortcut_letter.map(|l| l.to_string()),
        cot: r.cot.as_deref(),
        provenance: &r.provenance,
    };
    serde_json::to_string(&wire).expect("record serialization is infallible")
}

/// Parses and validates one JSONL line.
pub fn record_from_json(line: &str, line_no: usize) -> Result<DatasetRecord, RecordError> {
    let value: Value = serde_json::from_str(line).map_err(|e| RecordError::ParseError {
        line: line_no,
        message: e.to_string(),
    })?;
    let schema = |field: &str| RecordError::SchemaError {
        line: line_no,
        field: field.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| schema("<root>"))?;
    const KNOWN: [&str; 9] = [
        "id", "prompt", "choices", "gold", "family", "split", "shortcut_letter", "cot",
        "provenance",
    ];
    if let Some(extra) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(schema(extra));
    }
    let string = |field: &str| -> Result<String, RecordError> {
        obj.get(field)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| schema(field))
    };
    let opt_string = |field: &str| -> Result<Option<String>, RecordError> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(schema(field)),
        }
    };
    let letter = |field: &str, s: &str| s.parse::<Letter>().map_err(|_| schema(field));

    let choice_map = obj
        .get("choices")
        .and_then(Value::as_object)
        .ok_or_else(|| schema("choices"))?;
    let mut choices = Vec::with_capacity(choice_map.len());
    for (k, v) in choice_map {
        let text = v.as_str().ok_or_else(|| schema("choices"))?;
        choices.push(Choice {
            letter: letter("choices", k)?,
            text: text.to_string(),
        });
    }
    choices.sort_by_key(|c| c.letter);

    let task = TaskInstance {
        id: string("id")?,
        prompt: string("prompt")?,
        choices,
        gold: letter("gold", &string("gold")?)?,
        family: string("family")?,
        split: string("split")?.parse().map_err(|_| schema("split"))?,
        shortcut_letter: opt_string("shortcut_letter")?
            .map(|s| letter("shortcut_letter", &s))
            .transpose()?,
    };
    let record = DatasetRecord {
        task,
        cot: opt_string("cot")?,
        provenance: string("provenance")?,
    };
    record.check().map_err(schema)?;
    Ok(record)
}

pub fn parse_records(text: &str) -> Result<Vec<DatasetRecord>, RecordError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| record_from_json(line, i + 1))
        .collect()
}

pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>, RecordError> {
    parse_records(&fs::read_to_string(path)?)
}

pub fn records_to_jsonl(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_json(r));
        out.push('\n');
    }
    out
}

pub fn save_records(records: &[DatasetRecord], path: &Path) -> Result<(), RecordError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(records_to_jsonl(records).as_bytes())?;
    w.flush()?;
    Ok(())
}
