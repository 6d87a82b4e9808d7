//! Group-relative policy optimization.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_err, PreparedTask, TunerError};
use crate::objective::{compute_advantages, AdvantageMode, ClipMode, KlEstimator};
use crate::policy::{
    backprop, optimizer_step, sample_completion, save_checkpoint, snapshot_reference, AdamHyper, Completion,
    GrpoBatch, LossSpec, LrSchedule, OptState, OptimizerMode, PolicyError, PolicyParams, ReferenceParams,
    SequenceRef,
};
use crate::reward::{composite_reward, RewardBreakdown, RewardConfig};
use crate::rng::{rng_stream, stream_key, RngStream};
use crate::vocab::Vocab;

pub const DEFAULT_CHECKPOINT_STEPS: [u64; 5] = [0, 10, 20, 100, 165];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RltConfig {
    pub group_size: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on updates; `None` runs every epoch to completion.
    pub max_steps: Option<u64>,
    pub clip_mode: ClipMode,
    pub advantage_mode: AdvantageMode,
    pub kl_estimator: KlEstimator,
    pub optimizer: OptimizerMode,
    pub adam: AdamHyper,
    pub schedule: LrSchedule,
    pub reward: RewardConfig,
    pub checkpoint_steps: Vec<u64>,
    pub seed: u64,
    /// Record elapsed milliseconds per step. Off keeps the metrics file
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for RltConfig {
    fn default() -> Self {
        Self {
            group_size: 7,
            epsilon: 0.2,
            beta: 0.04,
            lr: 1e-5,
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            clip_mode: ClipMode::default(),
            advantage_mode: AdvantageMode::default(),
            kl_estimator: KlEstimator::default(),
            optimizer: OptimizerMode::default(),
            adam: AdamHyper::default(),
            schedule: LrSchedule::Constant,
            reward: RewardConfig::default(),
            checkpoint_steps: DEFAULT_CHECKPOINT_STEPS.to_vec(),
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl RltConfig {
    pub fn validate(&self) -> Result<(), TunerError> {
        let bad = |m: &str| Err(TunerError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be finite and > 0");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and >= 0");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        self.reward.validate().map_err(TunerError::InvalidConfig)
    }

    /// Number of updates `run_rlt` performs on `n` tasks.
    pub fn total_steps(&self, n: usize) -> u64 {
        let full = (self.epochs * n.div_ceil(self.batch_size)) as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Everything a training run carries between updates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub reference: ReferenceParams,
    pub opt: OptState,
    pub step: u64,
}

impl TrainState {
    /// Starts from `base`, which also becomes the frozen KL reference.
    pub fn new(base: PolicyParams) -> Self {
        Self {
            reference: snapshot_reference(&base),
            opt: OptState::new(&base),
            params: base,
            step: 0,
        }
    }
}

/// One sampled group for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub completions: Vec<Completion>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

/// Draws `k` completions; member `j` uses stream `group_base + j`.
pub fn sample_group(
    params: &PolicyParams,
    prompt: &[u32],
    k: usize,
    seed: u64,
    group_base: u64,
) -> Result<Vec<Completion>, PolicyError> {
    (0..k)
        .map(|j| {
            let mut rng = rng_stream(seed, group_base.wrapping_add(j as u64));
            sample_completion(params, prompt, &mut rng, params.cfg.max_gen_len)
        })
        .collect()
}

fn group_base(step: u64, slot: usize) -> u64 {
    stream_key("rlt.group", &[step, slot as u64])
}

/// Samples, scores and normalizes one group.
pub fn score_group(
    params: &PolicyParams,
    task: &PreparedTask,
    cfg: &RltConfig,
    vocab: &Vocab,
    base: u64,
) -> Result<GroupSample, TunerError> {
    let completions = sample_group(params, &task.prompt, cfg.group_size, cfg.seed, base)?;
    let rewards: Vec<RewardBreakdown> = completions
        .iter()
        .map(|c| composite_reward(&c.tokens, task.task.gold, &task.task.choices, vocab, &cfg.reward))
        .collect();
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let advantages = compute_advantages(&totals, cfg.advantage_mode).map_err(PolicyError::from)?;
    Ok(GroupSample { completions, rewards, advantages })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_r_acc: f64,
    pub mean_r_fmt: f64,
    pub mean_r_rep: f64,
    pub surrogate_loss: f64,
    pub kl: f64,
    pub total_loss: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "step,mean_reward,mean_r_acc,mean_r_fmt,mean_r_rep,surrogate_loss,kl,total_loss,wall_ms";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_r_acc,
            self.mean_r_fmt,
            self.mean_r_rep,
            self.surrogate_loss,
            self.kl,
            self.total_loss,
            self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// One update on a batch of prompts. `state` is only modified on success.
pub fn rlt_step(
    state: &mut TrainState,
    batch: &[&PreparedTask],
    cfg: &RltConfig,
    vocab: &Vocab,
    total_steps: u64,
) -> Result<MetricsRow, TunerError> {
    let started = Instant::now();
    let params = &state.params;
    let groups: Vec<GroupSample> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, t)| score_group(params, t, cfg, vocab, group_base(state.step, slot)))
        .collect::<Result<_, _>>()?;

    let mut grpo = GrpoBatch::default();
    for (t, g) in batch.iter().zip(&groups) {
        for (c, a) in g.completions.iter().zip(&g.advantages) {
            grpo.sequences.push(SequenceRef { prompt: &t.prompt, tokens: &c.tokens });
            grpo.old_logps.push(c.total_logp);
            grpo.advantages.push(*a);
        }
    }
    let spec = LossSpec::Total {
        batch: &grpo,
        epsilon: cfg.epsilon,
        clip_mode: cfg.clip_mode,
        reference: &state.reference,
        estimator: cfg.kl_estimator,
        beta: cfg.beta,
    };
    let (value, grads) = backprop(params, &spec)?;
    let lr = cfg.schedule.lr_at(cfg.lr, state.step, total_steps);
    let (next, opt) = optimizer_step(params, &grads, &state.opt, lr, cfg.optimizer, &cfg.adam)?;

    let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| &g.rewards).collect();
    let n = all.len() as f64;
    let mean = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / n;
    let row = MetricsRow {
        step: state.step + 1,
        mean_reward: mean(|r| r.total),
        mean_r_acc: mean(|r| r.r_acc),
        mean_r_fmt: mean(|r| r.r_fmt),
        mean_r_rep: mean(|r| r.r_rep),
        surrogate_loss: value.surrogate,
        kl: value.kl,
        total_loss: value.loss,
        wall_ms: if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
    };
    state.params = next;
    state.opt = opt;
    state.step += 1;
    Ok(row)
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RltOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<MetricsRow>,
    /// Snapshots at the configured steps that the run reached.
    pub checkpoints: Vec<(u64, PolicyParams)>,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Runs shuffled epochs of `rlt_step`. With `out_dir`, metrics stream to
/// `metrics.csv` and snapshots are written next to it.
pub fn run_rlt(
    cfg: &RltConfig,
    tasks: &[PreparedTask],
    base: PolicyParams,
    vocab: &Vocab,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<RltOutcome, TunerError> {
    cfg.validate()?;
    base.check()?;
    if tasks.is_empty() {
        return Err(TunerError::EmptyDataset);
    }
    let total = cfg.total_steps(tasks.len());
    let mut state = TrainState::new(base);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();

    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("metrics.csv");
            let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "{METRICS_HEADER}").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };
    let snapshot = |state: &TrainState, checkpoints: &mut Vec<(u64, PolicyParams)>| -> Result<(), TunerError> {
        if cfg.checkpoint_steps.contains(&state.step) {
            if let Some(dir) = out_dir {
                save_checkpoint(&state.params, &dir.join(checkpoint_file_name(state.step)))?;
            }
            checkpoints.push((state.step, state.params.clone()));
        }
        Ok(())
    };

    snapshot(&state, &mut checkpoints)?;
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        RngStream::named(cfg.seed, "rlt.shuffle", &[epoch as u64]).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= total {
                break 'outer;
            }
            let batch: Vec<&PreparedTask> = chunk.iter().map(|&i| &tasks[i]).collect();
            let row = rlt_step(&mut state, &batch, cfg, vocab, total)?;
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{}", row.csv_line()).map_err(io_err(path))?;
            }
            on_step(&row);
            metrics.push(row);
            snapshot(&state, &mut checkpoints)?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&state.params, &dir.join("final.ckpt"))?;
    }
    Ok(RltOutcome { params: state.params, metrics, checkpoints })
}

/// Writes a metrics file in one go.
pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<(), TunerError> {
    std::fs::write(path, metrics_csv(rows)).map_err(io_err(path))
}
