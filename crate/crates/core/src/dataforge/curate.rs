//! Validation, rejection sampling, rationale filtering and test-overlap
//! removal.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generator::{call_cot, call_generator, CandidateRecord, CotRequest, GeneratorClient, GeneratorError, GeneratorRequest};
use crate::records::{Choice, DatasetRecord, Letter, Split, TaskInstance};
use crate::reward::{extract_choice, parse_tagged_text};
use crate::rng::stream_key;
use crate::vocab::normalize_spacing;

/// Validator rules, checked in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    MissingQuestion,
    MissingChoices,
    MissingAnalysis,
    MissingAnswer,
    EmptyQuestion,
    LettersNotConsecutive,
    TooFewChoices,
    TooManyChoices,
    ChoiceNotInAnswerSet,
    DuplicateChoice,
    AnswerNotInChoices,
    EmptyAnalysis,
}

impl Rule {
    pub const ALL: [Rule; 12] = [
        Rule::MissingQuestion,
        Rule::MissingChoices,
        Rule::MissingAnalysis,
        Rule::MissingAnswer,
        Rule::EmptyQuestion,
        Rule::LettersNotConsecutive,
        Rule::TooFewChoices,
        Rule::TooManyChoices,
        Rule::ChoiceNotInAnswerSet,
        Rule::DuplicateChoice,
        Rule::AnswerNotInChoices,
        Rule::EmptyAnalysis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::MissingQuestion => "missing_question",
            Rule::MissingChoices => "missing_choices",
            Rule::MissingAnalysis => "missing_analysis",
            Rule::MissingAnswer => "missing_answer",
            Rule::EmptyQuestion => "empty_question",
            Rule::LettersNotConsecutive => "letters_not_consecutive",
            Rule::TooFewChoices => "too_few_choices",
            Rule::TooManyChoices => "too_many_choices",
            Rule::ChoiceNotInAnswerSet => "choice_not_in_answer_set",
            Rule::DuplicateChoice => "duplicate_choice",
            Rule::AnswerNotInChoices => "answer_not_in_choices",
            Rule::EmptyAnalysis => "empty_analysis",
        }
    }

    /// True when `c` violates this rule.
    fn fails(self, c: &CandidateRecord, req: &GeneratorRequest) -> bool {
        let choices = c.choices.as_ref();
        let n = choices.map_or(0, |m| m.len());
        match self {
            Rule::MissingQuestion => c.question.is_none(),
            Rule::MissingChoices => c.choices.is_none(),
            Rule::MissingAnalysis => c.analysis.is_none(),
            Rule::MissingAnswer => c.answer.is_none(),
            Rule::EmptyQuestion => c.question.as_deref().is_some_and(|q| q.trim().is_empty()),
            Rule::LettersNotConsecutive => choices.is_some_and(|m| {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort_by_key(|k| (k.len(), k.as_str()));
                keys.iter().enumerate().any(|(i, k)| {
                    i >= 26 || k.as_str() != ((b'A' + i as u8) as char).to_string()
                })
            }),
            Rule::TooFewChoices => choices.is_some() && n < 2,
            Rule::TooManyChoices => n > 4,
            Rule::ChoiceNotInAnswerSet => choices.is_some_and(|m| m.values().any(|t| !req.answer_set.contains(t))),
            Rule::DuplicateChoice => choices.is_some_and(|m| {
                let mut seen = HashSet::new();
                m.values().any(|t| !seen.insert(t))
            }),
            Rule::AnswerNotInChoices => match (choices, &c.answer) {
                (Some(m), Some(a)) => !m.contains_key(a.trim()),
                _ => false,
            },
            Rule::EmptyAnalysis => c.analysis.as_deref().is_some_and(|a| a.trim().is_empty()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(&'static str),
}

pub fn validate_with(c: &CandidateRecord, req: &GeneratorRequest, rules: &[Rule]) -> Verdict {
    rules
        .iter()
        .find(|r| r.fails(c, req))
        .map_or(Verdict::Accept, |r| Verdict::Reject(r.name()))
}

pub fn validate_candidate(c: &CandidateRecord, req: &GeneratorRequest) -> Verdict {
    validate_with(c, req, &Rule::ALL)
}

/// An accepted candidate and the request that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Accepted {
    pub attempt: usize,
    pub request: GeneratorRequest,
    pub candidate: CandidateRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub attempt: usize,
    pub request_seed: u64,
    pub reason: String,
    /// Reply body, kept for unparseable replies.
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleOutcome {
    pub accepted: Vec<Accepted>,
    pub rejections: Vec<Rejection>,
    pub attempts: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CurateError {
    #[error("attempts exhausted with {accepted} of {target} accepted")]
    Exhausted { accepted: usize, target: usize, outcome: Box<SampleOutcome> },
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

/// Request for attempt `i`: requests are used in order and cycled with a
/// fresh seed on every pass.
pub fn attempt_request(requests: &[GeneratorRequest], i: usize) -> GeneratorRequest {
    let mut r = requests[i % requests.len()].clone();
    let round = (i / requests.len()) as u64;
    if round > 0 {
        r.seed = stream_key("retry", &[r.seed, round]);
    }
    r
}

/// Draws candidates until `target_n` pass `rules`. Up to `in_flight` calls
/// run concurrently; results are consumed in attempt order.
pub fn rejection_sample(
    client: &dyn GeneratorClient,
    requests: &[GeneratorRequest],
    rules: &[Rule],
    target_n: usize,
    max_attempts: usize,
    in_flight: usize,
) -> Result<SampleOutcome, CurateError> {
    if max_attempts < target_n {
        return Err(CurateError::InvalidArgs("max_attempts must be >= target_n".into()));
    }
    if requests.is_empty() && target_n > 0 {
        return Err(CurateError::InvalidArgs("no requests".into()));
    }
    let mut out = SampleOutcome::default();
    let width = in_flight.max(1);
    while out.accepted.len() < target_n && out.attempts < max_attempts {
        let start = out.attempts;
        let end = (start + width).min(max_attempts);
        let results: Vec<(GeneratorRequest, Result<CandidateRecord, GeneratorError>)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let r = attempt_request(requests, i);
                let c = call_generator(client, &r);
                (r, c)
            })
            .collect();
        for (i, (request, res)) in (start..end).zip(results) {
            if out.accepted.len() == target_n {
                break;
            }
            out.attempts += 1;
            match res {
                Ok(candidate) => match validate_with(&candidate, &request, rules) {
                    Verdict::Accept => out.accepted.push(Accepted { attempt: i, request, candidate }),
                    Verdict::Reject(reason) => out.rejections.push(Rejection {
                        attempt: i,
                        request_seed: request.seed,
                        reason: reason.to_string(),
                        raw: None,
                    }),
                },
                Err(GeneratorError::MalformedReply { raw, .. }) => out.rejections.push(Rejection {
                    attempt: i,
                    request_seed: request.seed,
                    reason: "malformed_reply".into(),
                    raw: Some(raw),
                }),
                Err(e) => return Err(e.into()),
            }
        }
    }
    if out.accepted.len() < target_n {
        return Err(CurateError::Exhausted { accepted: out.accepted.len(), target: target_n, outcome: Box::new(out) });
    }
    Ok(out)
}

/// Converts an accepted candidate into a dataset record.
pub fn candidate_to_record(a: &Accepted, split: Split) -> Option<DatasetRecord> {
    let choices: Vec<Choice> = a
        .candidate
        .choices
        .as_ref()?
        .iter()
        .map(|(k, v)| Some(Choice { letter: k.parse().ok()?, text: v.clone() }))
        .collect::<Option<_>>()?;
    let gold: Letter = a.candidate.answer.as_deref()?.trim().parse().ok()?;
    let rec = DatasetRecord {
        task: TaskInstance {
            id: format!("gen-{:06}", a.attempt),
            prompt: normalize_spacing(a.candidate.question.as_deref()?),
            choices,
            gold,
            family: a.request.modality.clone(),
            split,
            shortcut_letter: None,
        },
        cot: None,
        provenance: format!("generator:seed={}", a.request.seed),
    };
    rec.check().ok()?;
    Some(rec)
}

pub fn cot_request(record: &DatasetRecord) -> CotRequest {
    let t = &record.task;
    CotRequest {
        modality: t.family.clone(),
        knowledge: String::new(),
        question: t.prompt.clone(),
        choices: t.choices.iter().map(|c| (c.letter.to_string(), c.text.clone())).collect(),
        label: t.gold_text().to_string(),
        seed: stream_key("cot", &[]) ^ stream_key(&t.id, &[]),
    }
}

/// Why a rationale was dropped.
pub fn check_cot(cot: &str, record: &DatasetRecord) -> Result<String, &'static str> {
    let parsed = parse_tagged_text(cot);
    if !parsed.well_formed {
        return Err("malformed_cot");
    }
    match extract_choice(&parsed.answer_words, &record.task.choices) {
        Some(l) if l == record.task.gold => Ok(normalize_spacing(cot)),
        Some(_) => Err("answer_mismatch"),
        None => Err("unextractable_answer"),
    }
}

/// Requests a rationale and keeps it only when it is well formed and
/// names the gold answer. Returns the rejection reason otherwise.
pub fn attach_cot(
    record: &DatasetRecord,
    client: &dyn GeneratorClient,
) -> Result<(DatasetRecord, Option<&'static str>), GeneratorError> {
    let mut out = record.clone();
    out.cot = None;
    let reason = match call_cot(client, &cot_request(record)) {
        Ok(text) => match check_cot(&text, record) {
            Ok(c) => {
                out.cot = Some(c);
                None
            }
            Err(r) => Some(r),
        },
        Err(GeneratorError::MalformedReply { .. }) => Some("malformed_reply"),
        Err(e) => return Err(e),
    };
    Ok((out, reason))
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Hash of prompt, sorted choice texts and gold text; invariant to letter
/// order and spacing.
pub fn overlap_key(t: &TaskInstance) -> String {
    let mut texts: Vec<String> = t.choices.iter().map(|c| norm(&c.text)).collect();
    texts.sort();
    let mut h = Sha256::new();
    h.update(norm(&normalize_spacing(&t.prompt)).as_bytes());
    for x in &texts {
        h.update([0x1f]);
        h.update(x.as_bytes());
    }
    h.update([0x1e]);
    h.update(norm(t.gold_text()).as_bytes());
    crate::policy::hex_digest(&h.finalize())
}

/// Drops records that also occur in `test`. Returns the kept records and
/// the number removed.
pub fn blacklist_filter(records: Vec<DatasetRecord>, test: &[DatasetRecord]) -> (Vec<DatasetRecord>, usize) {
    let banned: HashSet<String> = test.iter().map(|r| overlap_key(&r.task)).collect();
    let before = records.len();
    let kept: Vec<DatasetRecord> = records.into_iter().filter(|r| !banned.contains(&overlap_key(&r.task))).collect();
    let removed = before - kept.len();
    (kept, removed)
}
