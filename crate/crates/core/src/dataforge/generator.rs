//! Candidate generator contract and its clients.
//!
//! A generator answers two JSON-over-HTTP calls: `POST /generate` returns a
//! multiple-choice candidate with `QUESTION`, `CHOICE`, `ANALYSIS` and
//! `ANSWER` keys, and `POST /cot` returns `{"response": "<think> ..."}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::synth::reference_cot;
use crate::records::Letter;
use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed reply: {message}")]
    MalformedReply { raw: String, message: String },
    #[error("replay fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub modality: String,
    pub knowledge: String,
    pub answer_set: Vec<String>,
    pub seed: u64,
}

/// Parsed `/generate` reply. Every field is optional so that an incomplete
/// reply reaches the validator instead of failing to parse.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CandidateRecord {
    pub question: Option<String>,
    /// Letter label to option text, as labelled by the generator.
    pub choices: Option<BTreeMap<String, String>>,
    pub analysis: Option<String>,
    pub answer: Option<String>,
}

impl CandidateRecord {
    pub fn to_json(&self) -> String {
        let mut m = serde_json::Map::new();
        if let Some(q) = &self.question {
            m.insert("QUESTION".into(), Value::String(q.clone()));
        }
        if let Some(c) = &self.choices {
            let obj = c.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            m.insert("CHOICE".into(), Value::Object(obj));
        }
        if let Some(a) = &self.analysis {
            m.insert("ANALYSIS".into(), Value::String(a.clone()));
        }
        if let Some(a) = &self.answer {
            m.insert("ANSWER".into(), Value::String(a.clone()));
        }
        Value::Object(m).to_string()
    }
}

pub fn parse_candidate(raw: &str) -> Result<CandidateRecord, GeneratorError> {
    let bad = |message: String| GeneratorError::MalformedReply { raw: raw.to_string(), message };
    let v: Value = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| bad("reply is not an object".into()))?;
    let string_field = |key: &str| -> Result<Option<String>, GeneratorError> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(bad(format!("{key} is not a string"))),
        }
    };
    let choices = match obj.get("CHOICE") {
        None | Some(Value::Null) => None,
        Some(Value::Object(m)) => Some(
            m.iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok((k.clone(), s.clone())),
                    _ => Err(bad(format!("CHOICE.{k} is not a string"))),
                })
                .collect::<Result<BTreeMap<_, _>, _>>()?,
        ),
        Some(_) => return Err(bad("CHOICE is not an object".into())),
    };
    Ok(CandidateRecord {
        question: string_field("QUESTION")?,
        choices,
        analysis: string_field("ANALYSIS")?,
        answer: string_field("ANSWER")?,
    })
}

/// Body of a `/cot` call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotRequest {
    pub modality: String,
    pub knowledge: String,
    pub question: String,
    /// `(letter, text)` pairs in letter order.
    pub choices: Vec<(String, String)>,
    /// Text of the labelled answer.
    pub label: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotReply {
    pub response: String,
}

pub trait GeneratorClient: Sync {
    /// Raw `/generate` reply body.
    fn generate_raw(&self, req: &GeneratorRequest) -> Result<String, GeneratorError>;
    /// Raw `/cot` reply body.
    fn cot_raw(&self, req: &CotRequest) -> Result<String, GeneratorError>;
}

pub fn call_generator(client: &dyn GeneratorClient, req: &GeneratorRequest) -> Result<CandidateRecord, GeneratorError> {
    parse_candidate(&client.generate_raw(req)?)
}

pub fn call_cot(client: &dyn GeneratorClient, req: &CotRequest) -> Result<String, GeneratorError> {
    let raw = client.cot_raw(req)?;
    serde_json::from_str::<CotReply>(&raw)
        .map(|r| r.response)
        .map_err(|e| GeneratorError::MalformedReply { raw, message: e.to_string() })
}

/// Defects the mock can inject into a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Malformation {
    MissingAnswer,
    AnswerNotInSet,
    TooManyChoices,
    LettersNotConsecutive,
}

impl Malformation {
    pub const ALL: [Malformation; 4] = [
        Malformation::MissingAnswer,
        Malformation::AnswerNotInSet,
        Malformation::TooManyChoices,
        Malformation::LettersNotConsecutive,
    ];

    /// Validator rule that rejects a candidate with this defect.
    pub fn expected_reason(self) -> &'static str {
        match self {
            Malformation::MissingAnswer => "missing_answer",
            Malformation::AnswerNotInSet => "choice_not_in_answer_set",
            Malformation::TooManyChoices => "too_many_choices",
            Malformation::LettersNotConsecutive => "letters_not_consecutive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    /// Each request is malformed with this probability, uniformly over classes.
    Rate(f64),
    /// Even request seeds are malformed, odd ones are valid.
    Alternating,
    /// Every request carries this defect.
    AlwaysInvalid(Malformation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotMode {
    /// Findings in the think block and the labelled letter.
    #[default]
    Consistent,
    /// Tagged, but names a different letter.
    WrongAnswer,
    /// Prose with no tags.
    Untagged,
}

/// Deterministic in-process generator. Replies depend only on `seed` and
/// the request.
#[derive(Debug, Clone, PartialEq)]
pub struct MockGenerator {
    pub mode: MockMode,
    pub cot_mode: CotMode,
    pub seed: u64,
}

impl MockGenerator {
    pub fn new(mode: MockMode, seed: u64) -> Self {
        Self { mode, cot_mode: CotMode::Consistent, seed }
    }

    /// Defect this mock injects for `req`, if any.
    pub fn injected(&self, req: &GeneratorRequest) -> Option<Malformation> {
        let mut rng = RngStream::named(self.seed, "mock.defect", &[req.seed]);
        match self.mode {
            MockMode::Rate(p) => rng
                .bernoulli(p)
                .then(|| Malformation::ALL[rng.below(Malformation::ALL.len() as u64) as usize]),
            MockMode::Alternating => req.seed.is_multiple_of(2).then_some(Malformation::ALL[(req.seed / 2 % 4) as usize]),
            MockMode::AlwaysInvalid(m) => Some(m),
        }
    }

    pub fn candidate(&self, req: &GeneratorRequest) -> CandidateRecord {
        let mut rng = RngStream::named(self.seed, "mock.candidate", &[req.seed]);
        let mut pool = req.answer_set.clone();
        rng.shuffle(&mut pool);
        let n = pool.len().clamp(1, 4);
        let mut texts: Vec<String> = pool[..n].to_vec();
        let answer_idx = rng.below(n as u64) as usize;
        let letter = |i: usize| ((b'A' + i as u8) as char).to_string();
        let defect = self.injected(req);
        match defect {
            Some(Malformation::AnswerNotInSet) => texts[answer_idx] = format!("{}x", texts[answer_idx]),
            Some(Malformation::TooManyChoices) => {
                while texts.len() < 5 {
                    texts.push(format!("extra{}", texts.len()));
                }
            }
            _ => {}
        }
        let mut labels: Vec<String> = (0..texts.len()).map(letter).collect();
        if defect == Some(Malformation::LettersNotConsecutive) {
            if labels.len() < 2 {
                texts.push(format!("extra{}", texts.len()));
                labels.push(letter(1));
            }
            let last = labels.len() - 1;
            labels[last] = letter(last + 1);
        }
        let gold_label = labels[answer_idx].clone();
        let gold_text = texts[answer_idx].clone();
        CandidateRecord {
            question: Some(format!("{} {}", req.modality, req.knowledge)),
            choices: Some(labels.into_iter().zip(texts).collect()),
            analysis: Some(format!("the findings indicate {gold_text}")),
            answer: (defect != Some(Malformation::MissingAnswer)).then_some(gold_label),
        }
    }

    pub fn cot_text(&self, req: &CotRequest) -> String {
        let gold = req
            .choices
            .iter()
            .position(|(_, t)| *t == req.label)
            .and_then(Letter::from_index)
            .unwrap_or(Letter::A);
        match self.cot_mode {
            CotMode::Consistent => reference_cot(&req.question, gold),
            CotMode::WrongAnswer => {
                let wrong = Letter::from_index((gold.index() + 1) % req.choices.len().max(2)).unwrap();
                reference_cot(&req.question, wrong)
            }
            CotMode::Untagged => format!("the answer is {}", req.label),
        }
    }
}

impl GeneratorClient for MockGenerator {
    fn generate_raw(&self, req: &GeneratorRequest) -> Result<String, GeneratorError> {
        Ok(self.candidate(req).to_json())
    }

    fn cot_raw(&self, req: &CotRequest) -> Result<String, GeneratorError> {
        Ok(serde_json::to_string(&CotReply { response: self.cot_text(req) }).unwrap())
    }
}

/// HTTP client for a generator service.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    base_url: String,
    retries: usize,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub fn new(base_url: &str, timeout: Duration, retries: usize) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { base_url: base_url.trim_end_matches('/').to_string(), retries, agent }
    }

    fn post(&self, path: &str, body: String) -> Result<String, GeneratorError> {
        let url = format!("{}{path}", self.base_url);
        let mut last = String::new();
        for _ in 0..=self.retries {
            let res = self
                .agent
                .post(&url)
                .header("content-type", "application/json")
                .send(body.as_str())
                .and_then(|mut r| r.body_mut().read_to_string());
            match res {
                Ok(s) => return Ok(s),
                Err(e) => last = e.to_string(),
            }
        }
        Err(GeneratorError::Transport(format!("{url}: {last}")))
    }
}

impl GeneratorClient for RemoteGenerator {
    fn generate_raw(&self, req: &GeneratorRequest) -> Result<String, GeneratorError> {
        self.post("/generate", serde_json::to_string(req).unwrap())
    }

    fn cot_raw(&self, req: &CotRequest) -> Result<String, GeneratorError> {
        self.post("/cot", serde_json::to_string(req).unwrap())
    }
}

/// One recorded call.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub endpoint: String,
    pub request: Value,
    pub response: String,
}

/// Serves recorded exchanges, matched on endpoint and request body.
#[derive(Debug, Clone, Default)]
pub struct ReplayGenerator {
    pub exchanges: Vec<Exchange>,
}

impl ReplayGenerator {
    /// Loads `<name>.request.json` / `<name>.response.json` pairs, where the
    /// request file is `{"endpoint": "/generate", "body": {...}}`.
    pub fn load_dir(dir: &Path) -> Result<Self, GeneratorError> {
        let fx = |m: String| GeneratorError::Fixture(m);
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| fx(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".request.json")).map(String::from))
            .collect();
        names.sort();
        let mut exchanges = Vec::new();
        for n in names {
            let read = |suffix: &str| {
                let p = dir.join(format!("{n}.{suffix}.json"));
                std::fs::read_to_string(&p).map_err(|e| fx(format!("{}: {e}", p.display())))
            };
            let req: Value = serde_json::from_str(&read("request")?).map_err(|e| fx(format!("{n}: {e}")))?;
            let endpoint = req["endpoint"].as_str().ok_or_else(|| fx(format!("{n}: missing endpoint")))?;
            exchanges.push(Exchange {
                endpoint: endpoint.to_string(),
                request: req["body"].clone(),
                response: read("response")?.trim_end().to_string(),
            });
        }
        Ok(Self { exchanges })
    }

    pub fn lookup(&self, endpoint: &str, body: &Value) -> Option<&str> {
        self.exchanges
            .iter()
            .find(|e| e.endpoint == endpoint && &e.request == body)
            .map(|e| e.response.as_str())
    }

    fn serve(&self, endpoint: &str, body: Value) -> Result<String, GeneratorError> {
        self.lookup(endpoint, &body)
            .map(String::from)
            .ok_or_else(|| GeneratorError::Transport(format!("no recorded exchange for {endpoint} {body}")))
    }
}

impl GeneratorClient for ReplayGenerator {
    fn generate_raw(&self, req: &GeneratorRequest) -> Result<String, GeneratorError> {
        self.serve("/generate", serde_json::to_value(req).unwrap())
    }

    fn cot_raw(&self, req: &CotRequest) -> Result<String, GeneratorError> {
        self.serve("/cot", serde_json::to_value(req).unwrap())
    }
}
