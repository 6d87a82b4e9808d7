//! Scalar loss pieces shared by the policy backward pass and the tuner:
//! group-relative advantages, the clipped surrogate, and per-position KL.

use serde::{Deserialize, Serialize};

use crate::policy::Distribution;
use crate::vocab::TokenId;

/// Log-ratios are clamped to this magnitude before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 30.0;

/// Below this group standard deviation, `MeanStd` falls back to `MeanOnly`.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `min(ratio, 1 + eps)` multiplied by the advantage.
    #[default]
    #[serde(rename = "paper_one_sided")]
    OneSided,
    /// `min(A * ratio, A * clamp(ratio, 1 - eps, 1 + eps))`.
    PpoTwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Reward minus group mean.
    #[default]
    MeanOnly,
    /// Additionally divided by the group standard deviation.
    MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Full-vocabulary KL at every visited position.
    #[default]
    ExactPerToken,
    /// `q/p - ln(q/p) - 1` at the sampled token.
    K3Sample,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {0}")]
    LengthMismatch(&'static str),
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
}

/// Group-relative advantages.
///
/// The standard deviation is the population one (divide by k).
pub fn compute_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>, ObjectiveError> {
    let k = rewards.len();
    if k < 2 {
        return Err(ObjectiveError::GroupTooSmall(k));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(ObjectiveError::NonFinite("rewards"));
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    match mode {
        AdvantageMode::MeanOnly => Ok(centered),
        AdvantageMode::MeanStd => {
            let std = (centered.iter().map(|a| a * a).sum::<f64>() / k as f64).sqrt();
            if std < STD_FLOOR {
                Ok(centered)
            } else {
                Ok(centered.into_iter().map(|a| a / std).collect())
            }
        }
    }
}

/// Surrogate loss and its derivative with respect to each new sequence log-prob.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateValue {
    pub loss: f64,
    pub d_new_logp: Vec<f64>,
}

/// Sequence-level clipped surrogate, averaged over all sequences.
pub fn grpo_surrogate(
    new_logps: &[f64],
    old_logps: &[f64],
    advantages: &[f64],
    epsilon: f64,
    mode: ClipMode,
) -> Result<SurrogateValue, ObjectiveError> {
    let n = new_logps.len();
    if old_logps.len() != n || advantages.len() != n {
        return Err(ObjectiveError::LengthMismatch("surrogate inputs"));
    }
    if n == 0 {
        return Ok(SurrogateValue { loss: 0.0, d_new_logp: Vec::new() });
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_new_logp = Vec::with_capacity(n);
    for ((&new, &old), &a) in new_logps.iter().zip(old_logps).zip(advantages) {
        if !(new.is_finite() && old.is_finite() && a.is_finite()) {
            return Err(ObjectiveError::NonFinite("surrogate inputs"));
        }
        let raw = new - old;
        let log_ratio = raw.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
        let ratio = log_ratio.exp();
        // d ratio / d new_logp; zero once the clamp is active
        let d_ratio = if raw.abs() > LOG_RATIO_CLAMP { 0.0 } else { ratio };
        let (objective, d_objective) = match mode {
            ClipMode::OneSided => {
                let hi = 1.0 + epsilon;
                if ratio <= hi {
                    (a * ratio, a * d_ratio)
                } else {
                    (a * hi, 0.0)
                }
            }
            ClipMode::PpoTwoSided => {
                let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
                let unclipped_term = a * ratio;
                let clipped_term = a * clipped;
                if unclipped_term <= clipped_term {
                    (unclipped_term, a * d_ratio)
                } else {
                    (clipped_term, 0.0)
                }
            }
        };
        loss -= scale * objective;
        d_new_logp.push(-scale * d_objective);
    }
    if !loss.is_finite() {
        return Err(ObjectiveError::NonFinite("surrogate loss"));
    }
    Ok(SurrogateValue { loss, d_new_logp })
}

/// `KL(p || q)` over the full vocabulary and its gradient with respect to
/// the logits that produced `p`.
pub fn kl_exact_position(p: &Distribution, q: &Distribution) -> (f64, Vec<f64>) {
    let mut kl = 0.0;
    for ((&pv, &lp), &lq) in p.probs.iter().zip(&p.logps).zip(&q.logps) {
        if pv > 0.0 {
            kl += pv * (lp - lq);
        }
    }
    let grad = p
        .probs
        .iter()
        .zip(&p.logps)
        .zip(&q.logps)
        .map(|((&pv, &lp), &lq)| if pv > 0.0 { pv * (lp - lq - kl) } else { 0.0 })
        .collect();
    (kl, grad)
}

/// k3 estimator at one sampled token and its gradient with respect to the
/// logits of `p`.
pub fn k3_position(p: &Distribution, q: &Distribution, token: TokenId) -> (f64, Vec<f64>) {
    let t = token as usize;
    let log_r = q.logps[t] - p.logps[t];
    let r = log_r.exp();
    let value = r - log_r - 1.0;
    let d_logp = 1.0 - r;
    let grad = p
        .probs
        .iter()
        .enumerate()
        .map(|(u, &pu)| d_logp * (if u == t { 1.0 } else { 0.0 } - pu))
        .collect();
    (value, grad)
}

/// `L = surrogate + beta * kl`.
pub fn total_loss(surrogate: f64, kl: f64, beta: f64) -> f64 {
    surrogate + beta * kl
}
