//! Plain gradient descent and AdamW.

use serde::{Deserialize, Serialize};

use super::grad::Gradients;
use super::model::PolicyParams;
use super::PolicyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMode {
    /// `theta <- theta - lr * g`.
    PlainGd,
    #[default]
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl OptState {
    pub fn new(params: &PolicyParams) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
        }
    }
}

fn shapes_match(params: &PolicyParams, g: &Gradients) -> bool {
    params
        .tensors()
        .iter()
        .zip(g.tensors().iter())
        .all(|((_, a), (_, b))| a.len() == b.len())
}

/// One update. The parameter step counter always advances by one; the
/// Adam timestep only advances in `Adamw` mode.
pub fn optimizer_step(
    params: &PolicyParams,
    grads: &Gradients,
    opt: &OptState,
    lr: f64,
    mode: OptimizerMode,
    hyper: &AdamHyper,
) -> Result<(PolicyParams, OptState), PolicyError> {
    if !shapes_match(params, grads) || !shapes_match(params, &opt.m) || !shapes_match(params, &opt.v) {
        return Err(PolicyError::ShapeMismatch("gradient/optimizer state shapes differ from params".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(PolicyError::InvalidInput(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let mut next = params.clone();
    let mut state = opt.clone();
    match mode {
        OptimizerMode::PlainGd => {
            for ((_, p), (_, g)) in next.tensors_mut().into_iter().zip(grads.tensors()) {
                for (x, d) in p.iter_mut().zip(g) {
                    *x -= lr * d;
                }
            }
        }
        OptimizerMode::Adamw => {
            state.t += 1;
            let t = state.t as i32;
            let bc1 = 1.0 - hyper.beta1.powi(t);
            let bc2 = 1.0 - hyper.beta2.powi(t);
            let m_all = state.m.tensors_mut();
            let v_all = state.v.tensors_mut();
            for ((((_, p), (_, g)), (_, m)), (_, v)) in next
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(m_all)
                .zip(v_all)
            {
                for i in 0..p.len() {
                    m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                    v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * hyper.weight_decay * p[i];
                    p[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
                }
            }
        }
    }
    next.step += 1;
    Ok((next, state))
}

/// Learning-rate schedule over a known number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: u64, total_steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                if total_steps == 0 {
                    return base;
                }
                let frac = (step as f64 / total_steps as f64).min(1.0);
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}
