//! Supervised fine-tuning on tagged rationales, and the format warm-up
//! that produces a base policy for RL.

use serde::{Deserialize, Serialize};

use super::{PreparedTask, TunerError};
use crate::dataforge::synth::is_finding_word;
use crate::policy::{
    backprop, optimizer_step, AdamHyper, LossSpec, LrSchedule, OptState, OptimizerMode, PolicyParams, SequenceRef,
};
use crate::reward::{extracted_letter, parse_tagged};
use crate::rng::RngStream;
use crate::vocab::{normalize_spacing, TokenId, Vocab, ANSWER_CLOSE, ANSWER_OPEN, EOS, THINK_CLOSE, THINK_OPEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerMode,
    pub adam: AdamHyper,
    pub schedule: LrSchedule,
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self::text_preset()
    }
}

impl SftConfig {
    /// lr 1e-5, batch 32.
    pub fn text_preset() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 32,
            epochs: 2,
            optimizer: OptimizerMode::Adamw,
            adam: AdamHyper::default(),
            schedule: LrSchedule::Cosine,
            max_steps: None,
            seed: 0,
        }
    }

    /// lr 1e-4, batch 256.
    pub fn table_preset() -> Self {
        Self { lr: 1e-4, batch_size: 256, ..Self::text_preset() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "text" => Some(Self::text_preset()),
            "table" => Some(Self::table_preset()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TunerError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TunerError::InvalidConfig("lr must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TunerError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        let full = (self.epochs * n.div_ceil(self.batch_size)) as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// A prompt and the completion to imitate, ending in `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// Position of `target` where any token of the set is accepted.
    pub relaxed: Option<(usize, Vec<TokenId>)>,
}

/// Tokenizes a rationale and appends `<eos>` when absent.
pub fn cot_target(cot: &str, vocab: &Vocab) -> Result<Vec<TokenId>, TunerError> {
    let mut t = vocab.encode(&normalize_spacing(cot))?;
    if t.last() != Some(&EOS) {
        t.push(EOS);
    }
    Ok(t)
}

/// Builds examples from tasks and their rationales. Each rationale must be
/// well formed and answer the gold letter.
pub fn sft_examples(
    tasks: &[PreparedTask],
    cots: &[Option<String>],
    vocab: &Vocab,
) -> Result<Vec<SftExample>, TunerError> {
    tasks
        .iter()
        .zip(cots)
        .map(|(t, cot)| {
            let id = t.task.id.clone();
            let cot = cot.as_deref().ok_or_else(|| TunerError::MissingCot(id.clone()))?;
            let target = cot_target(cot, vocab)?;
            let parsed = parse_tagged(&target);
            if !parsed.well_formed {
                return Err(TunerError::InvalidCot { id, reason: "not well formed".into() });
            }
            if extracted_letter(&parsed, &t.task.choices, vocab) != Some(t.task.gold) {
                return Err(TunerError::InvalidCot { id, reason: "answer does not match gold".into() });
            }
            Ok(SftExample { id, prompt: t.prompt.clone(), target, relaxed: None })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftRow {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    pub rows: Vec<SftRow>,
}

struct SftLoop<'a> {
    cfg: &'a SftConfig,
    params: PolicyParams,
    opt: OptState,
    step: u64,
    total: u64,
    rows: Vec<SftRow>,
}

impl SftLoop<'_> {
    fn epoch(&mut self, examples: &[SftExample], epoch: u64) -> Result<bool, TunerError> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        RngStream::named(self.cfg.seed, "sft.shuffle", &[epoch]).shuffle(&mut order);
        for chunk in order.chunks(self.cfg.batch_size) {
            if self.step >= self.total {
                return Ok(false);
            }
            let seqs: Vec<SequenceRef> = chunk
                .iter()
                .map(|&i| SequenceRef { prompt: &examples[i].prompt, tokens: &examples[i].target })
                .collect();
            let relaxed: Vec<Option<(usize, &[TokenId])>> =
                chunk.iter().map(|&i| examples[i].relaxed.as_ref().map(|(p, s)| (*p, s.as_slice()))).collect();
            let spec = if relaxed.iter().all(Option::is_none) {
                LossSpec::SftCrossEntropy { examples: &seqs }
            } else {
                LossSpec::SftRelaxed { examples: &seqs, relaxed: &relaxed }
            };
            let (value, grads) = backprop(&self.params, &spec)?;
            let lr = self.cfg.schedule.lr_at(self.cfg.lr, self.step, self.total);
            let (p, o) = optimizer_step(&self.params, &grads, &self.opt, lr, self.cfg.optimizer, &self.cfg.adam)?;
            self.params = p;
            self.opt = o;
            self.step += 1;
            self.rows.push(SftRow { step: self.step, loss: value.loss });
        }
        Ok(true)
    }
}

pub fn run_sft(cfg: &SftConfig, examples: &[SftExample], base: PolicyParams) -> Result<SftOutcome, TunerError> {
    cfg.validate()?;
    base.check()?;
    if examples.is_empty() {
        return Err(TunerError::EmptyDataset);
    }
    let mut lp = SftLoop {
        cfg,
        opt: OptState::new(&base),
        params: base,
        step: 0,
        total: cfg.total_steps(examples.len()),
        rows: Vec::new(),
    };
    for e in 0..cfg.epochs {
        if !lp.epoch(examples, e as u64)? {
            break;
        }
    }
    Ok(SftOutcome { params: lp.params, rows: lp.rows })
}

/// Warm-up that teaches the tag layout without the task: the think block
/// restates the prompt's findings and the answer may be any choice letter.
///
/// The output rows of all letter tokens are tied before training and the
/// answer position is scored by the total mass on the task's letters, so
/// the letters stay exactly interchangeable: the result samples letters
/// uniformly and its greedy answer is always the lowest-id letter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { epochs: 40, lr: 1e-2, batch_size: 32, seed: 0 }
    }
}

fn word_id(vocab: &Vocab, w: &str) -> Result<TokenId, TunerError> {
    vocab.id(w).ok_or_else(|| crate::vocab::VocabError::UnknownToken(w.to_string()).into())
}

/// Template completion for `task` answering `letter_word`, and the index
/// of the letter in it.
pub fn warmup_target(
    task: &PreparedTask,
    letter_word: &str,
    vocab: &Vocab,
) -> Result<(Vec<TokenId>, usize), TunerError> {
    let mut t = vec![THINK_OPEN];
    for w in task.task.prompt.split_whitespace().filter(|w| is_finding_word(w)) {
        t.push(word_id(vocab, w)?);
    }
    t.extend([THINK_CLOSE, ANSWER_OPEN]);
    let at = t.len();
    t.push(word_id(vocab, letter_word)?);
    t.extend([ANSWER_CLOSE, EOS]);
    Ok((t, at))
}

/// Sets the output row and bias of every token in `ids` to their mean.
pub fn tie_output_rows(params: &mut PolicyParams, ids: &[TokenId]) {
    if ids.is_empty() {
        return;
    }
    let h = params.cfg.hidden_dim;
    let n = ids.len() as f64;
    let mut row = vec![0.0; h];
    let mut bias = 0.0;
    for &t in ids {
        let t = t as usize;
        for (r, w) in row.iter_mut().zip(&params.w_out[t * h..(t + 1) * h]) {
            *r += w / n;
        }
        bias += params.b_out[t] / n;
    }
    for &t in ids {
        let t = t as usize;
        params.w_out[t * h..(t + 1) * h].copy_from_slice(&row);
        params.b_out[t] = bias;
    }
}

pub fn format_warmup(
    cfg: &WarmupConfig,
    tasks: &[PreparedTask],
    mut base: PolicyParams,
    vocab: &Vocab,
) -> Result<SftOutcome, TunerError> {
    if tasks.is_empty() {
        return Err(TunerError::EmptyDataset);
    }
    base.check()?;
    let mut letters: Vec<TokenId> = Vec::new();
    for t in tasks {
        for c in &t.task.choices {
            let id = word_id(vocab, &c.letter.to_string())?;
            if !letters.contains(&id) {
                letters.push(id);
            }
        }
    }
    letters.sort_unstable();
    tie_output_rows(&mut base, &letters);
    let sft = SftConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        schedule: LrSchedule::Constant,
        seed: cfg.seed,
        ..SftConfig::text_preset()
    };
    sft.validate()?;
    let mut lp = SftLoop {
        cfg: &sft,
        opt: OptState::new(&base),
        params: base,
        step: 0,
        total: sft.total_steps(tasks.len()),
        rows: Vec::new(),
    };
    for e in 0..cfg.epochs {
        let examples: Vec<SftExample> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = RngStream::named(cfg.seed, "warmup.letter", &[e as u64, i as u64]);
                let c = &t.task.choices[rng.below(t.task.choices.len() as u64) as usize];
                let (target, at) = warmup_target(t, &c.letter.to_string(), vocab)?;
                let set = t
                    .task
                    .choices
                    .iter()
                    .map(|c| word_id(vocab, &c.letter.to_string()))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(SftExample { id: t.task.id.clone(), prompt: t.prompt.clone(), target, relaxed: Some((at, set)) })
            })
            .collect::<Result<_, TunerError>>()?;
        lp.epoch(&examples, e as u64)?;
    }
    Ok(SftOutcome { params: lp.params, rows: lp.rows })
}
