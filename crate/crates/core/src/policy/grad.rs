//! Analytic gradients.
//!
//! Every loss here is a sum of per-position terms whose derivative with
//! respect to that position's logits is cheap to write down; the backward
//! pass then pushes those logit gradients through the MLP and embedding
//! table.

use super::model::{trace_sequence, PolicyParams, SequenceTrace};
use super::PolicyError;
use crate::objective::{grpo_surrogate, k3_position, kl_exact_position, ClipMode, KlEstimator};
use crate::vocab::TokenId;

/// Gradient tensors, shaped like [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Self {
            embed: vec![0.0; p.embed.len()],
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w_out: vec![0.0; p.w_out.len()],
            b_out: vec![0.0; p.b_out.len()],
        }
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

    /// All entries flattened in serialization order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    fn ensure_finite(&self) -> Result<(), PolicyError> {
        for (name, t) in self.tensors() {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(PolicyError::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

/// A prompt and a completion scored under teacher forcing.
#[derive(Debug, Clone, Copy)]
pub struct SequenceRef<'a> {
    pub prompt: &'a [TokenId],
    pub tokens: &'a [TokenId],
}

/// Sampled sequences with their sampling-time log-probs and advantages.
#[derive(Debug, Clone, Default)]
pub struct GrpoBatch<'a> {
    pub sequences: Vec<SequenceRef<'a>>,
    pub old_logps: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Clipped surrogate averaged over the batch.
    Surrogate {
        batch: &'a GrpoBatch<'a>,
        epsilon: f64,
        clip_mode: ClipMode,
    },
    /// KL to a frozen reference, summed over positions, averaged over sequences.
    Kl {
        batch: &'a GrpoBatch<'a>,
        reference: &'a PolicyParams,
        estimator: KlEstimator,
    },
    /// `surrogate + beta * kl`.
    Total {
        batch: &'a GrpoBatch<'a>,
        epsilon: f64,
        clip_mode: ClipMode,
        reference: &'a PolicyParams,
        estimator: KlEstimator,
        beta: f64,
    },
    /// Mean per-token cross-entropy of each completion given its prompt.
    SftCrossEntropy { examples: &'a [SequenceRef<'a>] },
    /// As `SftCrossEntropy`, except that where `relaxed[i]` is
    /// `Some((pos, set))` the target at `pos` is any token of `set` and the
    /// loss there is `-ln sum(p[u] for u in set)`.
    SftRelaxed {
        examples: &'a [SequenceRef<'a>],
        relaxed: &'a [Option<(usize, &'a [TokenId])>],
    },
}

/// Loss value with its components where they apply.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
}

/// Adds `dlogits` at every position of `trace` into `grads`.
fn backward_sequence(
    params: &PolicyParams,
    prompt: &[TokenId],
    trace: &SequenceTrace,
    dlogits: &[Vec<f64>],
    grads: &mut Gradients,
) {
    let cfg = &params.cfg;
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let f = cfg.feature_dim();
    let mut d_mean = vec![0.0; e];
    let mut dh = vec![0.0; h];
    let mut dpre = vec![0.0; h];
    let mut df = vec![0.0; f];
    for (pos, dz) in trace.positions.iter().zip(dlogits) {
        dh.iter_mut().for_each(|x| *x = 0.0);
        for (o, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b_out[o] += g;
            let w_row = &params.w_out[o * h..(o + 1) * h];
            let g_row = &mut grads.w_out[o * h..(o + 1) * h];
            for i in 0..h {
                g_row[i] += g * pos.hidden[i];
                dh[i] += g * w_row[i];
            }
        }
        for i in 0..h {
            dpre[i] = dh[i] * (1.0 - pos.hidden[i] * pos.hidden[i]);
        }
        df.iter_mut().for_each(|x| *x = 0.0);
        for (i, &g) in dpre.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b1[i] += g;
            let w_row = &params.w1[i * f..(i + 1) * f];
            let g_row = &mut grads.w1[i * f..(i + 1) * f];
            for j in 0..f {
                g_row[j] += g * pos.features[j];
                df[j] += g * w_row[j];
            }
        }
        for (m, d) in d_mean.iter_mut().zip(&df[..e]) {
            *m += d;
        }
        for (slot, &tok) in pos.window.iter().enumerate() {
            let src = &df[(slot + 1) * e..(slot + 2) * e];
            let dst = &mut grads.embed[tok as usize * e..(tok as usize + 1) * e];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / prompt.len() as f64;
    for &tok in prompt {
        let dst = &mut grads.embed[tok as usize * e..(tok as usize + 1) * e];
        for (a, b) in dst.iter_mut().zip(&d_mean) {
            *a += b * inv;
        }
    }
}

/// `scale * (onehot(token) - p)`: gradient of `scale * log p[token]`.
fn logp_grad(probs: &[f64], token: TokenId, scale: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(u, &p)| scale * (if u == token as usize { 1.0 } else { 0.0 } - p))
        .collect()
}

fn traces(params: &PolicyParams, seqs: &[SequenceRef<'_>]) -> Result<Vec<SequenceTrace>, PolicyError> {
    seqs.iter()
        .map(|s| trace_sequence(params, s.prompt, s.tokens))
        .collect()
}

/// Logit gradients indexed by sequence, then position.
type SeqLogitGrads = Vec<Vec<Vec<f64>>>;

/// Surrogate value plus per-position logit gradients (already scaled).
fn surrogate_terms(
    batch: &GrpoBatch<'_>,
    tr: &[SequenceTrace],
    epsilon: f64,
    clip_mode: ClipMode,
    weight: f64,
) -> Result<(f64, SeqLogitGrads), PolicyError> {
    let new_logps: Vec<f64> = batch
        .sequences
        .iter()
        .zip(tr)
        .map(|(s, t)| t.logps(s.tokens).iter().sum())
        .collect();
    let sv = grpo_surrogate(&new_logps, &batch.old_logps, &batch.advantages, epsilon, clip_mode)?;
    let dl = batch
        .sequences
        .iter()
        .zip(tr)
        .zip(&sv.d_new_logp)
        .map(|((s, t), &d)| {
            t.positions
                .iter()
                .zip(s.tokens)
                .map(|(p, &tok)| logp_grad(&p.dist.probs, tok, weight * d))
                .collect()
        })
        .collect();
    Ok((sv.loss, dl))
}

fn kl_terms(
    batch: &GrpoBatch<'_>,
    tr: &[SequenceTrace],
    reference: &PolicyParams,
    estimator: KlEstimator,
    weight: f64,
) -> Result<(f64, SeqLogitGrads), PolicyError> {
    let ref_tr = traces(reference, &batch.sequences)?;
    let n = batch.sequences.len().max(1) as f64;
    let mut total = 0.0;
    let mut all = Vec::with_capacity(tr.len());
    for ((s, t), rt) in batch.sequences.iter().zip(tr).zip(&ref_tr) {
        let mut per_pos = Vec::with_capacity(t.positions.len());
        for ((p, q), &tok) in t.positions.iter().zip(&rt.positions).zip(s.tokens) {
            let (v, g) = match estimator {
                KlEstimator::ExactPerToken => kl_exact_position(&p.dist, &q.dist),
                KlEstimator::K3Sample => k3_position(&p.dist, &q.dist, tok),
            };
            total += v / n;
            per_pos.push(g.into_iter().map(|x| x * weight / n).collect());
        }
        all.push(per_pos);
    }
    Ok((total, all))
}

type Relaxed<'a> = Option<(usize, &'a [TokenId])>;

fn sft_terms(examples: &[SequenceRef<'_>], tr: &[SequenceTrace], relaxed: &[Relaxed<'_>]) -> (f64, Vec<Vec<Vec<f64>>>) {
    let n_tokens: usize = examples.iter().map(|e| e.tokens.len()).sum();
    let scale = 1.0 / n_tokens.max(1) as f64;
    let mut loss = 0.0;
    let dl = examples
        .iter()
        .zip(tr)
        .enumerate()
        .map(|(i, (e, t))| {
            let rel = relaxed.get(i).copied().flatten();
            t.positions
                .iter()
                .zip(e.tokens)
                .enumerate()
                .map(|(j, (p, &tok))| match rel {
                    Some((at, set)) if at == j => {
                        let mass: f64 = set.iter().map(|&u| p.dist.probs[u as usize]).sum();
                        loss -= scale * mass.ln();
                        p.dist
                            .probs
                            .iter()
                            .enumerate()
                            .map(|(u, &pu)| {
                                let inside = if set.contains(&(u as TokenId)) { pu / mass } else { 0.0 };
                                -scale * (inside - pu)
                            })
                            .collect()
                    }
                    _ => {
                        loss -= scale * p.dist.logps[tok as usize];
                        logp_grad(&p.dist.probs, tok, -scale)
                    }
                })
                .collect()
        })
        .collect();
    (loss, dl)
}

fn add_into(acc: &mut [Vec<Vec<f64>>], other: Vec<Vec<Vec<f64>>>) {
    for (a_seq, o_seq) in acc.iter_mut().zip(other) {
        for (a, o) in a_seq.iter_mut().zip(o_seq) {
            for (x, y) in a.iter_mut().zip(o) {
                *x += y;
            }
        }
    }
}

/// Evaluates the loss described by `spec` and its exact gradient.
pub fn backprop(params: &PolicyParams, spec: &LossSpec<'_>) -> Result<(LossValue, Gradients), PolicyError> {
    params.check()?;
    let mut grads = Gradients::zeros_like(params);
    let (value, seqs, dlogits, tr) = match *spec {
        LossSpec::Surrogate { batch, epsilon, clip_mode } => {
            let tr = traces(params, &batch.sequences)?;
            let (s, dl) = surrogate_terms(batch, &tr, epsilon, clip_mode, 1.0)?;
            (LossValue { loss: s, surrogate: s, kl: 0.0 }, &batch.sequences[..], dl, tr)
        }
        LossSpec::Kl { batch, reference, estimator } => {
            reference.check()?;
            let tr = traces(params, &batch.sequences)?;
            let (k, dl) = kl_terms(batch, &tr, reference, estimator, 1.0)?;
            (LossValue { loss: k, surrogate: 0.0, kl: k }, &batch.sequences[..], dl, tr)
        }
        LossSpec::Total { batch, epsilon, clip_mode, reference, estimator, beta } => {
            reference.check()?;
            let tr = traces(params, &batch.sequences)?;
            let (s, mut dl) = surrogate_terms(batch, &tr, epsilon, clip_mode, 1.0)?;
            let (k, dk) = kl_terms(batch, &tr, reference, estimator, beta)?;
            add_into(&mut dl, dk);
            let loss = crate::objective::total_loss(s, k, beta);
            (LossValue { loss, surrogate: s, kl: k }, &batch.sequences[..], dl, tr)
        }
        LossSpec::SftCrossEntropy { examples } => {
            let tr = traces(params, examples)?;
            let (loss, dl) = sft_terms(examples, &tr, &[]);
            (LossValue { loss, surrogate: 0.0, kl: 0.0 }, examples, dl, tr)
        }
        LossSpec::SftRelaxed { examples, relaxed } => {
            if relaxed.len() != examples.len() {
                return Err(PolicyError::InvalidInput("one relaxed entry per example".into()));
            }
            let tr = traces(params, examples)?;
            let (loss, dl) = sft_terms(examples, &tr, relaxed);
            (LossValue { loss, surrogate: 0.0, kl: 0.0 }, examples, dl, tr)
        }
    };
    for ((s, t), dz) in seqs.iter().zip(&tr).zip(&dlogits) {
        backward_sequence(params, s.prompt, t, dz, &mut grads);
    }
    grads.ensure_finite()?;
    if !value.loss.is_finite() {
        return Err(PolicyError::NonFinite("loss".into()));
    }
    Ok((value, grads))
}

/// Loss value only, with no gradient work.
pub fn evaluate_loss(params: &PolicyParams, spec: &LossSpec<'_>) -> Result<LossValue, PolicyError> {
    backprop(params, spec).map(|(v, _)| v)
}
