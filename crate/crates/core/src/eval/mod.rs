//! Evaluation: greedy inference under the two prompting strategies,
//! accuracy reports, model comparisons and answer-length histograms.

mod render;

pub use render::{delta, Delta, Percent};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{greedy_completion, sample_completion, PolicyError, PolicyParams};
use crate::prompting::{build_prompt, Strategy};
use crate::records::{DatasetRecord, Letter, Split, TaskInstance};
use crate::reward::{extract_choice, extracted_letter, parse_tagged};
use crate::rng::RngStream;
use crate::vocab::{Vocab, VocabError, EOS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkManifest {
    pub name: String,
    pub records: Vec<TaskInstance>,
    pub ood: bool,
}

impl BenchmarkManifest {
    pub fn new(name: &str, records: Vec<TaskInstance>, ood: bool) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::InvalidManifest(format!("{name} has no records")));
        }
        Ok(Self { name: name.to_string(), records, ood })
    }

    /// Benchmark made of one split, named after it.
    pub fn from_split(records: &[DatasetRecord], split: Split) -> Result<Self, EvalError> {
        let tasks = records.iter().filter(|r| r.task.split == split).map(|r| r.task.clone()).collect();
        Self::new(split.as_str(), tasks, split == Split::OodTest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
    /// Temperature-1 sampling, one stream per instance.
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub id: String,
    pub family: String,
    pub text: String,
    pub letter: Option<Letter>,
    pub correct: bool,
    /// Whitespace words of the output, not counting `<eos>`.
    pub length: usize,
}

/// Letter read from an output. Under `direct`, an output without a tagged
/// answer falls back to its first word that is a choice letter.
pub fn extract_output(raw: &[u32], task: &TaskInstance, strategy: Strategy, vocab: &Vocab) -> Option<Letter> {
    let t = parse_tagged(raw);
    if let Some(l) = extracted_letter(&t, &task.choices, vocab) {
        return Some(l);
    }
    if strategy == Strategy::Direct {
        let words = vocab.words(raw).ok()?;
        return words.iter().find_map(|w| {
            let l: Letter = w.parse().ok()?;
            task.choices.iter().any(|c| c.letter == l).then_some(l)
        });
    }
    None
}

pub fn run_inference(
    params: &PolicyParams,
    manifest: &BenchmarkManifest,
    strategy: Strategy,
    vocab: &Vocab,
    decoding: Decoding,
) -> Result<Vec<InferenceOutput>, EvalError> {
    manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let prompt = build_prompt(vocab, task, strategy)?;
            let max = params.cfg.max_gen_len;
            let c = match decoding {
                Decoding::Greedy => greedy_completion(params, &prompt, max)?,
                Decoding::Sampled { seed } => {
                    sample_completion(params, &prompt, &mut RngStream::named(seed, "eval.sample", &[i as u64]), max)?
                }
            };
            let letter = extract_output(&c.tokens, task, strategy, vocab);
            let length = c.tokens.iter().filter(|&&t| t != EOS).count();
            Ok(InferenceOutput {
                id: task.id.clone(),
                family: task.family.clone(),
                text: vocab.decode(&c.tokens)?,
                letter,
                correct: letter == Some(task.gold),
                length,
            })
        })
        .collect()
}

/// Extracts letters from already generated text, e.g. saved outputs.
pub fn letter_from_text(text: &str, task: &TaskInstance, strategy: Strategy) -> Option<Letter> {
    let parsed = crate::reward::parse_tagged_text(text);
    if parsed.well_formed {
        if let Some(l) = extract_choice(&parsed.answer_words, &task.choices) {
            return Some(l);
        }
    }
    if strategy == Strategy::Direct {
        return text
            .split_whitespace()
            .filter_map(|w| w.parse::<Letter>().ok())
            .find(|l| task.choices.iter().any(|c| c.letter == *l));
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n: u64,
    pub n_correct: u64,
    pub accuracy: Percent,
}

impl Counts {
    fn new(n: u64, n_correct: u64) -> Self {
        Self { n, n_correct, accuracy: Percent::from_counts(n_correct, n) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub start: usize,
    pub all: u64,
    pub correct: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bucket_width: usize,
    /// Non-empty buckets in increasing order of `start`.
    pub buckets: Vec<Bucket>,
}

pub const DEFAULT_BUCKET_WIDTH: usize = 4;

pub fn length_stats(outputs: &[InferenceOutput], bucket_width: usize) -> LengthHistogram {
    let w = bucket_width.max(1);
    let mut m: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for o in outputs {
        let e = m.entry(o.length / w * w).or_default();
        e.0 += 1;
        e.1 += o.correct as u64;
    }
    LengthHistogram {
        bucket_width: w,
        buckets: m.into_iter().map(|(start, (all, correct))| Bucket { start, all, correct }).collect(),
    }
}

impl LengthHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket_start,all_count,correct_count\n");
        for b in &self.buckets {
            writeln!(s, "{},{},{}", b.start, b.all, b.correct).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub strategy: Strategy,
    pub ood: bool,
    pub n: u64,
    pub n_correct: u64,
    pub accuracy: Percent,
    pub per_family: BTreeMap<String, Counts>,
    pub length_histogram: LengthHistogram,
    /// Ids of outputs with no extractable answer, counted as incorrect.
    pub unextractable: Vec<String>,
}

pub fn score_report(
    outputs: &[InferenceOutput],
    manifest: &BenchmarkManifest,
    strategy: Strategy,
) -> Result<EvalReport, EvalError> {
    if outputs.len() != manifest.records.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} outputs for {} records",
            outputs.len(),
            manifest.records.len()
        )));
    }
    if let Some((o, t)) = outputs.iter().zip(&manifest.records).find(|(o, t)| o.id != t.id) {
        return Err(EvalError::LengthMismatch(format!("output {} aligned with record {}", o.id, t.id)));
    }
    let mut fam: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for o in outputs {
        let e = fam.entry(o.family.clone()).or_default();
        e.0 += 1;
        e.1 += o.correct as u64;
    }
    let n = outputs.len() as u64;
    let n_correct = outputs.iter().filter(|o| o.correct).count() as u64;
    Ok(EvalReport {
        benchmark: manifest.name.clone(),
        strategy,
        ood: manifest.ood,
        n,
        n_correct,
        accuracy: Percent::from_counts(n_correct, n),
        per_family: fam.into_iter().map(|(k, (a, b))| (k, Counts::new(a, b))).collect(),
        length_histogram: length_stats(outputs, DEFAULT_BUCKET_WIDTH),
        unextractable: outputs.iter().filter(|o| o.letter.is_none()).map(|o| o.id.clone()).collect(),
    })
}

pub fn evaluate(
    params: &PolicyParams,
    manifest: &BenchmarkManifest,
    strategy: Strategy,
    vocab: &Vocab,
) -> Result<EvalReport, EvalError> {
    let out = run_inference(params, manifest, strategy, vocab, Decoding::Greedy)?;
    score_report(&out, manifest, strategy)
}

/// Left-aligned first column, right-aligned rest.
pub fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    s
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    /// One header row and one value row: overall, then one column per family.
    pub fn to_text(&self) -> String {
        let mut head = vec!["benchmark".to_string(), "strategy".into(), "n".into(), "correct".into(), "overall".into()];
        let mut row = vec![
            self.benchmark.clone(),
            self.strategy.as_str().into(),
            self.n.to_string(),
            self.n_correct.to_string(),
            self.accuracy.to_string(),
        ];
        for (k, c) in &self.per_family {
            head.push(k.clone());
            row.push(c.accuracy.to_string());
        }
        head.push("unextractable".into());
        row.push(self.unextractable.len().to_string());
        render_table(&[head, row])
    }
}

/// Accuracy per model and benchmark, with Δ rows against the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub benchmarks: Vec<String>,
    pub base: String,
    pub rows: Vec<(String, Vec<Percent>)>,
    pub deltas: Vec<(String, Vec<Delta>)>,
}

/// `reports` lists each model with one report per benchmark, in the same
/// benchmark order for every model. The first model is the base.
pub fn compare_models(reports: &[(String, Vec<EvalReport>)]) -> Result<DeltaTable, EvalError> {
    let (base_name, base) = reports.first().ok_or_else(|| EvalError::LengthMismatch("no models".into()))?;
    let benchmarks: Vec<String> = base.iter().map(|r| r.benchmark.clone()).collect();
    let mut rows = Vec::new();
    let mut deltas = Vec::new();
    for (name, rs) in reports {
        let names: Vec<&String> = rs.iter().map(|r| &r.benchmark).collect();
        if names.len() != benchmarks.len() || names.iter().zip(&benchmarks).any(|(a, b)| *a != b) {
            return Err(EvalError::LengthMismatch(format!("{name} was scored on a different benchmark set")));
        }
        let acc: Vec<Percent> = rs.iter().map(|r| r.accuracy).collect();
        if name != base_name {
            deltas.push((name.clone(), base.iter().zip(&acc).map(|(b, a)| delta(b.accuracy, *a)).collect()));
        }
        rows.push((name.clone(), acc));
    }
    Ok(DeltaTable { benchmarks, base: base_name.clone(), rows, deltas })
}

impl DeltaTable {
    pub fn to_text(&self) -> String {
        let mut t = vec![std::iter::once("model".to_string()).chain(self.benchmarks.iter().cloned()).collect()];
        for (m, acc) in &self.rows {
            t.push(std::iter::once(m.clone()).chain(acc.iter().map(|p| p.to_string())).collect());
        }
        for (m, d) in &self.deltas {
            t.push(
                std::iter::once(format!("Δ {m} vs {}", self.base))
                    .chain(d.iter().map(|x| x.to_string()))
                    .collect(),
            );
        }
        render_table(&t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }
}

/// Base, SFT and RL models on the iid and ood splits of one task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub table: DeltaTable,
    pub reports: Vec<(String, Vec<EvalReport>)>,
    /// RL minus SFT on the ood split; reported, not judged.
    pub rlt_minus_sft_ood: Delta,
}

pub fn shortcut_experiment(
    models: [(&str, &PolicyParams); 3],
    iid: &BenchmarkManifest,
    ood: &BenchmarkManifest,
    strategy: Strategy,
    vocab: &Vocab,
) -> Result<ExperimentReport, EvalError> {
    let mut reports = Vec::new();
    for (name, p) in models {
        reports.push((name.to_string(), vec![evaluate(p, iid, strategy, vocab)?, evaluate(p, ood, strategy, vocab)?]));
    }
    let table = compare_models(&reports)?;
    let rlt_minus_sft_ood = delta(table.rows[1].1[1], table.rows[2].1[1]);
    Ok(ExperimentReport { table, reports, rlt_minus_sft_ood })
}

impl ExperimentReport {
    pub fn to_text(&self) -> String {
        let mut s = self.table.to_text();
        writeln!(s, "ood {} minus {}: {}", self.table.rows[2].0, self.table.rows[1].0, self.rlt_minus_sft_ood).unwrap();
        s
    }
}
