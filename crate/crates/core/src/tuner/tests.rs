use super::*;
use crate::dataforge::synth::{generate_synthetic_tasks, reference_cot, synth_vocab, SynthSpec};
use crate::objective::AdvantageMode;
use crate::policy::{
    checksum, init_policy, load_checkpoint, sequence_logprob, to_bytes, LossSpec, LrSchedule, PolicyConfig, PolicyParams,
    SequenceRef,
};
use crate::rng::RngStream;
use crate::vocab::{Vocab, EOS};

fn fixture(n_train: usize) -> (Vocab, Vec<PreparedTask>) {
    let spec = SynthSpec { n_train, n_iid_test: 0, n_ood_test: 0, p_train: 0.0, ..Default::default() };
    let vocab = synth_vocab(&spec).unwrap();
    let records = generate_synthetic_tasks(&spec).unwrap();
    let tasks = prepare_tasks(&records, &vocab, Strategy::Cot).unwrap();
    (vocab, tasks)
}

fn small_policy(vocab: &Vocab, scale: f64, seed: u64) -> PolicyParams {
    let cfg = PolicyConfig { embed_dim: 4, hidden_dim: 8, init_scale: scale, ..PolicyConfig::new(vocab.len()) };
    init_policy(cfg, &mut RngStream::named(seed, "test.init", &[])).unwrap()
}

/// Every position puts all but ~1e-16 of its mass on `<eos>`.
fn eos_policy(vocab: &Vocab) -> PolicyParams {
    let mut p = small_policy(vocab, 0.0, 0);
    p.b_out[EOS as usize] = 40.0;
    p
}

fn same_weights(a: &PolicyParams, b: &PolicyParams) -> bool {
    a.tensors() == b.tensors()
}

fn warm_base(vocab: &Vocab, tasks: &[PreparedTask]) -> PolicyParams {
    let cfg = WarmupConfig { epochs: 30, batch_size: 4, lr: 3e-2, seed: 0 };
    format_warmup(&cfg, tasks, small_policy(vocab, 0.5, 4), vocab).unwrap().params
}

fn rlt_cfg() -> RltConfig {
    RltConfig { lr: 1e-2, batch_size: 4, epochs: 1, seed: 3, ..Default::default() }
}

#[test]
fn group_has_k_members() {
    let (vocab, tasks) = fixture(16);
    let p = small_policy(&vocab, 0.5, 1);
    let g = sample_group(&p, &tasks[0].prompt, 7, 11, 0).unwrap();
    assert_eq!(g.len(), 7);
    let scored = score_group(&p, &tasks[0], &RltConfig::default(), &vocab, 0).unwrap();
    assert_eq!(scored.completions.len(), 7);
    assert_eq!(scored.rewards.len(), 7);
    assert_eq!(scored.advantages.len(), 7);
    assert!(scored.advantages.iter().sum::<f64>().abs() < 1e-9);
}

#[test]
fn group_members_are_independent_of_evaluation_order() {
    let (vocab, tasks) = fixture(16);
    let p = small_policy(&vocab, 0.5, 1);
    let whole = sample_group(&p, &tasks[0].prompt, 7, 5, 100).unwrap();
    for (j, c) in whole.iter().enumerate().rev() {
        let single = sample_group(&p, &tasks[0].prompt, 1, 5, 100 + j as u64).unwrap();
        assert_eq!(&single[0], c);
    }
}

#[test]
fn degenerate_policy_gives_identical_members() {
    let (vocab, tasks) = fixture(16);
    let p = eos_policy(&vocab);
    let g = sample_group(&p, &tasks[0].prompt, 2, 0, 0).unwrap();
    assert_eq!(g[0].tokens, vec![EOS]);
    assert_eq!(g[0].tokens, g[1].tokens);
}

#[test]
fn zero_advantage_step_at_reference_is_stationary() {
    let (vocab, tasks) = fixture(16);
    let base = eos_policy(&vocab);
    let mut state = TrainState::new(base.clone());
    let cfg = RltConfig { optimizer: crate::policy::OptimizerMode::PlainGd, ..rlt_cfg() };
    let batch: Vec<&PreparedTask> = tasks.iter().take(4).collect();
    let row = rlt_step(&mut state, &batch, &cfg, &vocab, 1).unwrap();
    assert_eq!(row.kl, 0.0);
    assert!(same_weights(&state.params, &base));
}

#[test]
fn step_advances_counter_and_keeps_reference() {
    let (vocab, tasks) = fixture(16);
    let base = small_policy(&vocab, 0.5, 2);
    let mut state = TrainState::new(base.clone());
    let before = checksum(&state.reference);
    let batch: Vec<&PreparedTask> = tasks.iter().take(4).collect();
    let cfg = rlt_cfg();
    for expected in 1..=3 {
        let row = rlt_step(&mut state, &batch, &cfg, &vocab, 3).unwrap();
        assert_eq!(state.step, expected);
        assert_eq!(row.step, expected);
        assert_eq!(checksum(&state.reference), before);
    }
    assert_ne!(to_bytes(&state.params), to_bytes(&base));
}

#[test]
fn failed_step_leaves_state_untouched() {
    let (vocab, tasks) = fixture(16);
    let mut state = TrainState::new(small_policy(&vocab, 0.5, 2));
    let mut bad = tasks[0].clone();
    bad.prompt = vec![vocab.len() as u32 + 5];
    let before = to_bytes(&state.params);
    assert!(rlt_step(&mut state, &[&bad], &rlt_cfg(), &vocab, 1).is_err());
    assert_eq!(state.step, 0);
    assert_eq!(to_bytes(&state.params), before);
}

#[test]
fn zero_steps_returns_init() {
    let (vocab, tasks) = fixture(16);
    let base = small_policy(&vocab, 0.5, 4);
    let cfg = RltConfig { max_steps: Some(0), ..rlt_cfg() };
    let out = run_rlt(&cfg, &tasks, base.clone(), &vocab, None, |_| {}).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(to_bytes(&out.params), to_bytes(&base));
    assert_eq!(out.checkpoints.len(), 1);
}

#[test]
fn checkpoint_marks_produce_files() {
    let (vocab, tasks) = fixture(16);
    let dir = tempfile::tempdir().unwrap();
    let cfg = RltConfig { lr: 1e-2, batch_size: 2, epochs: 21, max_steps: Some(165), ..Default::default() };
    let out = run_rlt(&cfg, &tasks, small_policy(&vocab, 0.5, 4), &vocab, Some(dir.path()), |_| {}).unwrap();
    let mut ckpts: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("step_"))
        .collect();
    ckpts.sort();
    assert_eq!(
        ckpts,
        ["step_000000.ckpt", "step_000010.ckpt", "step_000020.ckpt", "step_000100.ckpt", "step_000165.ckpt"]
    );
    assert_eq!(out.metrics.len(), 165);
    let last = load_checkpoint(&dir.path().join("step_000165.ckpt")).unwrap();
    assert_eq!(to_bytes(&last), to_bytes(&out.params));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&out.metrics));
}

#[test]
fn runs_are_bit_identical() {
    let (vocab, tasks) = fixture(16);
    let cfg = RltConfig { epochs: 2, advantage_mode: AdvantageMode::MeanStd, ..rlt_cfg() };
    let base = warm_base(&vocab, &tasks);
    let a = run_rlt(&cfg, &tasks, base.clone(), &vocab, None, |_| {}).unwrap();
    let b = run_rlt(&cfg, &tasks, base.clone(), &vocab, None, |_| {}).unwrap();
    assert!(a.metrics.iter().any(|r| r.mean_reward > 0.0));
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(to_bytes(&a.params), to_bytes(&b.params));
    let other = RltConfig { seed: 4, ..cfg };
    let c = run_rlt(&other, &tasks, base, &vocab, None, |_| {}).unwrap();
    assert_ne!(metrics_csv(&a.metrics), metrics_csv(&c.metrics));
}

#[test]
fn empty_train_split_is_rejected() {
    let (vocab, _) = fixture(16);
    let err = run_rlt(&rlt_cfg(), &[], small_policy(&vocab, 0.5, 4), &vocab, None, |_| {}).unwrap_err();
    assert!(matches!(err, TunerError::EmptyDataset));
}

#[test]
fn invalid_rlt_configs_are_rejected() {
    for cfg in [
        RltConfig { group_size: 1, ..Default::default() },
        RltConfig { epsilon: 0.0, ..Default::default() },
        RltConfig { beta: -0.1, ..Default::default() },
        RltConfig { batch_size: 0, ..Default::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(TunerError::InvalidConfig(_))));
    }
    assert!(RltConfig { beta: 0.0, ..Default::default() }.validate().is_ok());
}

#[test]
fn total_steps_respects_cap() {
    let cfg = RltConfig { batch_size: 8, epochs: 2, ..Default::default() };
    assert_eq!(cfg.total_steps(500), 126);
    assert_eq!(RltConfig { max_steps: Some(10), ..cfg }.total_steps(500), 10);
}

fn cots(tasks: &[PreparedTask]) -> Vec<Option<String>> {
    tasks.iter().map(|t| Some(reference_cot(&t.task.prompt, t.task.gold))).collect()
}

#[test]
fn sft_memorizes_one_example() {
    let (vocab, tasks) = fixture(16);
    let one = &tasks[..1];
    let ex = sft_examples(one, &cots(one), &vocab).unwrap();
    let cfg = SftConfig { lr: 5e-2, batch_size: 1, epochs: 300, schedule: LrSchedule::Constant, ..Default::default() };
    let base = small_policy(&vocab, 0.1, 6);
    let out = run_sft(&cfg, &ex, base).unwrap();
    let last = out.rows.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
    assert!(out.rows[0].loss > last);
}

#[test]
fn sft_zero_lr_is_identity() {
    let (vocab, tasks) = fixture(16);
    let ex = sft_examples(&tasks, &cots(&tasks), &vocab).unwrap();
    let base = small_policy(&vocab, 0.3, 6);
    let cfg = SftConfig { lr: 0.0, ..Default::default() };
    let out = run_sft(&cfg, &ex, base.clone()).unwrap();
    assert!(!out.rows.is_empty());
    assert!(same_weights(&out.params, &base));
}

#[test]
fn uniform_policy_cross_entropy() {
    let (vocab, tasks) = fixture(16);
    let ex = sft_examples(&tasks[..1], &cots(&tasks[..1]), &vocab).unwrap();
    let base = small_policy(&vocab, 0.0, 0);
    let live = (vocab.len() - 1) as f64;
    let total = -sequence_logprob(&base, &ex[0].prompt, &ex[0].target).unwrap();
    assert!((total - ex[0].target.len() as f64 * live.ln()).abs() < 1e-9);
    let spec = LossSpec::SftCrossEntropy {
        examples: &[SequenceRef { prompt: &ex[0].prompt, tokens: &ex[0].target }],
    };
    let v = crate::policy::evaluate_loss(&base, &spec).unwrap();
    assert!((v.loss - live.ln()).abs() < 1e-12);
}

#[test]
fn sft_requires_valid_rationales() {
    let (vocab, tasks) = fixture(16);
    let t = &tasks[..1];
    let err = sft_examples(t, &[None], &vocab).unwrap_err();
    assert!(matches!(err, TunerError::MissingCot(id) if id == t[0].task.id));

    let untagged = Some("normal".to_string());
    assert!(matches!(sft_examples(t, &[untagged], &vocab), Err(TunerError::InvalidCot { .. })));

    let wrong = crate::records::Letter::from_index((t[0].task.gold.index() + 1) % 4).unwrap();
    let mismatch = Some(reference_cot(&t[0].task.prompt, wrong));
    assert!(matches!(sft_examples(t, &[mismatch], &vocab), Err(TunerError::InvalidCot { .. })));
}

#[test]
fn sft_presets() {
    assert_eq!(SftConfig::preset("text").unwrap().lr, 1e-5);
    assert_eq!(SftConfig::preset("text").unwrap().batch_size, 32);
    assert_eq!(SftConfig::preset("table").unwrap().lr, 1e-4);
    assert_eq!(SftConfig::default().epochs, 2);
    assert!(SftConfig::preset("other").is_none());
}

#[test]
fn tied_rows_are_equal() {
    let (vocab, _) = fixture(16);
    let mut p = small_policy(&vocab, 0.5, 8);
    let ids: Vec<u32> = ["A", "B", "C", "D"].iter().map(|w| vocab.id(w).unwrap()).collect();
    tie_output_rows(&mut p, &ids);
    let h = p.cfg.hidden_dim;
    let row = |t: u32| &p.w_out[t as usize * h..(t as usize + 1) * h];
    for &t in &ids[1..] {
        assert_eq!(row(t), row(ids[0]));
        assert_eq!(p.b_out[t as usize], p.b_out[ids[0] as usize]);
    }
}

#[test]
fn warmup_target_layout() {
    let (vocab, tasks) = fixture(16);
    let (t, at) = warmup_target(&tasks[0], "C", &vocab).unwrap();
    assert_eq!(vocab.token(t[at]), Some("C"));
    let text = vocab.decode(&t).unwrap();
    assert!(text.starts_with("<think> f0a"), "{text}");
    assert!(text.ends_with("</think> <answer> C </answer> <eos>"), "{text}");
}
