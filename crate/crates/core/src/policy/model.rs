//! Mean-pooled prompt + trailing-window MLP policy.
//!
//! ```text
//! features = [mean(E[prompt]) ; E[w_1] ; ... ; E[w_m]]     (left-padded with <pad>)
//! logits   = W_out tanh(W_1 features + b_1) + b_out,  logits[<pad>] = -inf
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::rng::RngStream;
use crate::vocab::{TokenId, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub max_gen_len: usize,
    pub init_scale: f64,
}

impl PolicyConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 8,
            hidden_dim: 32,
            context_window: 4,
            max_gen_len: 32,
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if self.vocab_size <= PAD as usize {
            return bad("vocab_size must cover the reserved tokens");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context_window == 0 {
            return bad("dimensions must be >= 1");
        }
        if self.max_gen_len < 6 {
            return bad("max_gen_len must be >= 6");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and >= 0");
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        (self.context_window + 1) * self.embed_dim
    }

    /// Tensor names and lengths in serialization order.
    pub fn tensor_shapes(&self) -> [(&'static str, usize); 5] {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        [
            ("embed", v * e),
            ("w1", h * self.feature_dim()),
            ("b1", h),
            ("w_out", v * h),
            ("b_out", v),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, n)| n).sum()
    }
}

/// Flat row-major parameter tensors.
///
/// `embed` is `vocab x embed`, `w1` is `hidden x feature`, `w_out` is
/// `vocab x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub embed: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub step: u64,
}

impl PolicyParams {
    pub fn zeros(cfg: PolicyConfig) -> Self {
        let [e, w1, b1, wo, bo] = cfg.tensor_shapes().map(|(_, n)| vec![0.0; n]);
        Self { cfg, embed: e, w1, b1, w_out: wo, b_out: bo, step: 0 }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("embed", &self.embed),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 5] {
        [
            ("embed", &mut self.embed),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    /// Verifies tensor lengths and finiteness against `cfg`.
    pub fn check(&self) -> Result<(), PolicyError> {
        self.cfg.validate()?;
        for ((name, t), (_, n)) in self.tensors().into_iter().zip(self.cfg.tensor_shapes()) {
            if t.len() != n {
                return Err(PolicyError::ShapeMismatch(format!(
                    "{name}: expected {n} entries, found {}",
                    t.len()
                )));
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(PolicyError::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), PolicyError> {
        match tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            Some(t) => Err(PolicyError::InvalidInput(format!("token id {t} out of range"))),
            None => Ok(()),
        }
    }
}

/// Draws every entry i.i.d. uniform in `[-init_scale, init_scale]`, tensor
/// by tensor in serialization order.
pub fn init_policy(cfg: PolicyConfig, rng: &mut RngStream) -> Result<PolicyParams, PolicyError> {
    cfg.validate()?;
    let mut p = PolicyParams::zeros(cfg);
    let s = cfg.init_scale;
    for (_, t) in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = rng.uniform(-s, s);
        }
    }
    Ok(p)
}

/// Frozen parameter snapshot. Cloning shares the same immutable storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceParams(Arc<PolicyParams>);

pub fn snapshot_reference(params: &PolicyParams) -> ReferenceParams {
    ReferenceParams(Arc::new(params.clone()))
}

impl std::ops::Deref for ReferenceParams {
    type Target = PolicyParams;
    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

/// Next-token distribution over the whole vocabulary; `<pad>` has zero mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub logps: Vec<f64>,
}

impl Distribution {
    /// Max-subtracted softmax, optionally masking one index to probability 0.
    pub fn from_logits(logits: &[f64], masked: Option<usize>) -> Self {
        let live = |i: usize| Some(i) != masked;
        let max = logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| live(i))
            .map(|(_, &z)| z)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| live(i))
            .map(|(_, &z)| (z - max).exp())
            .sum();
        let lse = max + sum.ln();
        let logps: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &z)| if live(i) { z - lse } else { f64::NEG_INFINITY })
            .collect();
        let probs = logps.iter().map(|&l| l.exp()).collect();
        Self { probs, logps }
    }

    /// Argmax; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Inverse-CDF draw from one uniform variate. Zero-mass tokens are
    /// never returned.
    pub fn sample(&self, rng: &mut RngStream) -> TokenId {
        let u = rng.next_f64();
        let mut cum = 0.0;
        let mut last_live = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                last_live = i;
                if u < cum {
                    return i as TokenId;
                }
            }
        }
        last_live as TokenId
    }
}

/// Cached forward state at one position, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct PositionTrace {
    pub window: Vec<TokenId>,
    pub features: Vec<f64>,
    pub hidden: Vec<f64>,
    pub dist: Distribution,
}

pub(crate) fn prompt_mean(params: &PolicyParams, prompt: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
    if prompt.is_empty() {
        return Err(PolicyError::InvalidInput("prompt must be nonempty".into()));
    }
    params.check_tokens(prompt)?;
    let e = params.cfg.embed_dim;
    let mut mean = vec![0.0; e];
    for &t in prompt {
        let row = &params.embed[t as usize * e..(t as usize + 1) * e];
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let inv = 1.0 / prompt.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Last `m` prefix tokens, left-padded with `<pad>`.
pub fn context_window(prefix: &[TokenId], m: usize) -> Vec<TokenId> {
    let take = prefix.len().min(m);
    let mut w = vec![PAD; m - take];
    w.extend_from_slice(&prefix[prefix.len() - take..]);
    w
}

pub(crate) fn forward_position(params: &PolicyParams, mean: &[f64], prefix: &[TokenId]) -> PositionTrace {
    let cfg = &params.cfg;
    let (e, h, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
    let f = cfg.feature_dim();
    let window = context_window(prefix, cfg.context_window);
    let mut features = Vec::with_capacity(f);
    features.extend_from_slice(mean);
    for &t in &window {
        features.extend_from_slice(&params.embed[t as usize * e..(t as usize + 1) * e]);
    }
    let hidden: Vec<f64> = (0..h)
        .map(|i| {
            let row = &params.w1[i * f..(i + 1) * f];
            let pre: f64 = row.iter().zip(&features).map(|(a, b)| a * b).sum::<f64>() + params.b1[i];
            pre.tanh()
        })
        .collect();
    let logits: Vec<f64> = (0..v)
        .map(|o| {
            let row = &params.w_out[o * h..(o + 1) * h];
            row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + params.b_out[o]
        })
        .collect();
    let dist = Distribution::from_logits(&logits, Some(PAD as usize));
    PositionTrace { window, features, hidden, dist }
}

pub fn next_token_dist(
    params: &PolicyParams,
    prompt: &[TokenId],
    prefix: &[TokenId],
) -> Result<Distribution, PolicyError> {
    params.check()?;
    if prefix.len() >= params.cfg.max_gen_len {
        return Err(PolicyError::InvalidInput(format!(
            "prefix length {} reaches max_gen_len {}",
            prefix.len(),
            params.cfg.max_gen_len
        )));
    }
    params.check_tokens(prefix)?;
    let mean = prompt_mean(params, prompt)?;
    Ok(forward_position(params, &mean, prefix).dist)
}

/// Teacher-forced forward pass over a whole completion.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    pub prompt_mean: Vec<f64>,
    pub positions: Vec<PositionTrace>,
}

impl SequenceTrace {
    pub fn logps(&self, tokens: &[TokenId]) -> Vec<f64> {
        self.positions
            .iter()
            .zip(tokens)
            .map(|(p, &t)| p.dist.logps[t as usize])
            .collect()
    }
}

pub(crate) fn trace_sequence(
    params: &PolicyParams,
    prompt: &[TokenId],
    tokens: &[TokenId],
) -> Result<SequenceTrace, PolicyError> {
    if tokens.is_empty() {
        return Err(PolicyError::InvalidInput("completion must be nonempty".into()));
    }
    if tokens.len() > params.cfg.max_gen_len {
        return Err(PolicyError::InvalidInput(format!(
            "completion length {} exceeds max_gen_len {}",
            tokens.len(),
            params.cfg.max_gen_len
        )));
    }
    params.check_tokens(tokens)?;
    let mean = prompt_mean(params, prompt)?;
    let positions = (0..tokens.len())
        .map(|t| forward_position(params, &mean, &tokens[..t]))
        .collect();
    Ok(SequenceTrace { prompt_mean: mean, positions })
}

pub fn sequence_logprob(
    params: &PolicyParams,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<f64, PolicyError> {
    params.check()?;
    let trace = trace_sequence(params, prompt, completion)?;
    Ok(trace.logps(completion).iter().sum())
}

/// A generated sequence with the log-probabilities recorded at draw time.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<TokenId>,
    pub logps: Vec<f64>,
    pub total_logp: f64,
}

fn generate(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_gen_len: usize,
    mut pick: impl FnMut(&Distribution) -> TokenId,
) -> Result<Completion, PolicyError> {
    params.check()?;
    let limit = max_gen_len.min(params.cfg.max_gen_len);
    let mean = prompt_mean(params, prompt)?;
    let mut tokens = Vec::new();
    let mut logps = Vec::new();
    while tokens.len() < limit {
        let pos = forward_position(params, &mean, &tokens);
        let t = pick(&pos.dist);
        logps.push(pos.dist.logps[t as usize]);
        tokens.push(t);
        if t == EOS {
            break;
        }
    }
    let total_logp = logps.iter().sum();
    Ok(Completion { tokens, logps, total_logp })
}

/// Ancestral sampling at temperature 1 until `<eos>` or the length limit.
pub fn sample_completion(
    params: &PolicyParams,
    prompt: &[TokenId],
    rng: &mut RngStream,
    max_gen_len: usize,
) -> Result<Completion, PolicyError> {
    generate(params, prompt, max_gen_len, |d| d.sample(rng))
}

/// Argmax decoding with lowest-id tie-break.
pub fn greedy_completion(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_gen_len: usize,
) -> Result<Completion, PolicyError> {
    generate(params, prompt, max_gen_len, Distribution::argmax)
}
