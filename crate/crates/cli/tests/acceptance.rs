//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rltune::dataforge::curate::{
    attempt_request, blacklist_filter, candidate_to_record, overlap_key, rejection_sample, validate_candidate, Rule,
    Verdict,
};
use rltune::dataforge::generator::{MockGenerator, MockMode};
use rltune::dataforge::synth::{generate_synthetic_tasks, SynthSpec};
use rltune::eval::{delta, evaluate, BenchmarkManifest, Percent};
use rltune::objective::{compute_advantages, grpo_surrogate, k3_position, kl_exact_position, AdvantageMode, ClipMode, KlEstimator};
use rltune::policy::{
    backprop, evaluate_loss, greedy_completion, init_policy, load_checkpoint, sequence_logprob, Distribution, GrpoBatch,
    LossSpec, PolicyConfig, PolicyParams, SequenceRef,
};
use rltune::prompting::Strategy;
use rltune::records::{Choice, DatasetRecord, Letter, Split};
use rltune::reward::{composite_reward, RewardConfig};
use rltune::rng::{stream_key, RngStream};
use rltune::tuner::prepare_tasks;
use rltune::vocab::{build_vocab, Vocab};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(args: &[&str]) -> i32 {
    rltune_cli::run(std::iter::once("rltune").chain(args.iter().copied()))
}

fn small_policy(seed: u64, label: &str) -> PolicyParams {
    let cfg = PolicyConfig {
        vocab_size: 10,
        embed_dim: 2,
        hidden_dim: 4,
        context_window: 2,
        max_gen_len: 8,
        init_scale: 0.5,
    };
    init_policy(cfg, &mut RngStream::named(seed, label, &[])).unwrap()
}

const SEQS: [(&[u32], &[u32]); 4] = [
    (&[6, 7], &[0, 8, 1, 2, 6, 3, 4]),
    (&[6, 7], &[0, 1, 2, 7, 3]),
    (&[8], &[2, 6, 4, 9]),
    (&[9, 6], &[0, 9, 9, 1, 2, 8, 3]),
];

fn batch<'a>(p: &PolicyParams, advantages: &[f64], shifts: &[f64]) -> GrpoBatch<'a> {
    let sequences: Vec<SequenceRef<'a>> = SEQS.iter().map(|&(prompt, tokens)| SequenceRef { prompt, tokens }).collect();
    let old_logps = sequences
        .iter()
        .zip(shifts)
        .map(|(s, d)| sequence_logprob(p, s.prompt, s.tokens).unwrap() - d)
        .collect();
    GrpoBatch { sequences, old_logps, advantages: advantages.to_vec() }
}

fn worst_fd_error(p: &PolicyParams, spec: &LossSpec) -> f64 {
    let g = backprop(p, spec).unwrap().1.flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    for k in 0..5 {
        for i in 0..p.tensors()[k].1.len() {
            let mut plus = p.clone();
            plus.tensors_mut()[k].1[i] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[k].1[i] -= h;
            let fd = (evaluate_loss(&plus, spec).unwrap().loss - evaluate_loss(&minus, spec).unwrap().loss) / (2.0 * h);
            let rel = (g[idx] - fd).abs() / g[idx].abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            idx += 1;
        }
    }
    worst
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let p = small_policy(1, "fd.policy");
    let r = small_policy(2, "fd.reference");
    check(p.cfg.num_params() <= 200, || format!("{} parameters", p.cfg.num_params()))?;
    // ratios 1.05, 1.105, 0.67 and 1.65 cover both sides of both clips
    let b = batch(&p, &[0.8, -0.5, -0.9, 0.6], &[0.05, 0.1, -0.4, 0.5]);
    let specs: Vec<(&str, LossSpec)> = vec![
        ("surrogate one-sided", LossSpec::Surrogate { batch: &b, epsilon: 0.2, clip_mode: ClipMode::OneSided }),
        ("surrogate two-sided", LossSpec::Surrogate { batch: &b, epsilon: 0.2, clip_mode: ClipMode::PpoTwoSided }),
        ("exact kl", LossSpec::Kl { batch: &b, reference: &r, estimator: KlEstimator::ExactPerToken }),
        (
            "total",
            LossSpec::Total {
                batch: &b,
                epsilon: 0.2,
                clip_mode: ClipMode::OneSided,
                reference: &r,
                estimator: KlEstimator::ExactPerToken,
                beta: 0.04,
            },
        ),
        ("sft cross-entropy", LossSpec::SftCrossEntropy { examples: &b.sequences }),
    ];
    let mut worst: f64 = 0.0;
    for (name, spec) in &specs {
        let e = worst_fd_error(&p, spec);
        check(e < 1e-4, || format!("{name}: relative error {e:.2e}"))?;
        worst = worst.max(e);
    }
    let took = t0.elapsed();
    check(took < Duration::from_secs(30), || format!("took {took:?}"))?;
    Ok(format!("{} params, max rel err {worst:.2e}, {:.2}s", p.cfg.num_params(), took.as_secs_f64()))
}

fn advantage_invariant() -> Outcome {
    let mut rng = RngStream::named(7, "acceptance.groups", &[]);
    let (mut worst_sum, mut worst_var) = (0.0f64, 0.0f64);
    let mut normalized = 0;
    for g in 0..10_000 {
        let k = 2 + rng.below(15) as usize;
        let rewards: Vec<f64> = match g % 4 {
            0 => vec![rng.uniform(-1.0, 2.0); k],
            1 => (0..k).map(|_| rng.below(3) as f64 - rng.below(4) as f64 / 3.0).collect(),
            _ => (0..k).map(|_| rng.uniform(-1.0, 2.0)).collect(),
        };
        let a = compute_advantages(&rewards, AdvantageMode::MeanOnly).unwrap();
        worst_sum = worst_sum.max(a.iter().sum::<f64>().abs());
        let mean = rewards.iter().sum::<f64>() / k as f64;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64).sqrt();
        let s = compute_advantages(&rewards, AdvantageMode::MeanStd).unwrap();
        if std >= 1e-8 {
            let var = s.iter().map(|x| x * x).sum::<f64>() / k as f64;
            worst_var = worst_var.max((var - 1.0).abs());
            normalized += 1;
        }
    }
    check(worst_sum <= 1e-9, || format!("advantage sum {worst_sum:e}"))?;
    check(worst_var <= 1e-6, || format!("variance error {worst_var:e}"))?;
    Ok(format!("10000 groups, max |sum| {worst_sum:.1e}, max |var-1| {worst_var:.1e} over {normalized}"))
}

fn surrogate_semantics() -> Outcome {
    // (ratio, advantage, epsilon, one-sided loss, two-sided loss)
    let goldens = [
        (1.0, 1.0, 0.2, -1.0, -1.0),
        (1.5, 1.0, 0.2, -1.2, -1.2),
        (0.5, -1.0, 0.2, 0.5, 0.8),
        (1.1, 2.0, 0.2, -2.2, -2.2),
        (0.7, 1.0, 0.2, -0.7, -0.7),
        (1.5, -1.0, 0.2, 1.2, 1.5),
        (0.9, -2.0, 0.1, 1.8, 1.8),
        (1.3, 0.5, 0.1, -0.55, -0.55),
    ];
    for (ratio, a, eps, one, two) in goldens {
        for (mode, want) in [(ClipMode::OneSided, one), (ClipMode::PpoTwoSided, two)] {
            let got = grpo_surrogate(&[f64::ln(ratio)], &[0.0], &[a], eps, mode).unwrap().loss;
            check((got - want).abs() < 1e-12, || format!("{mode:?} ratio {ratio} A {a}: {got} != {want}"))?;
        }
    }
    let p = small_policy(3, "surrogate.policy");
    let b = batch(&p, &[0.5, 1.0, 2.0, 0.1], &[0.5, 0.3, 0.25, 1.0]);
    let (_, g) = backprop(&p, &LossSpec::Surrogate { batch: &b, epsilon: 0.2, clip_mode: ClipMode::PpoTwoSided }).unwrap();
    check(g.max_abs() == 0.0, || format!("clipped-branch gradient {:e}", g.max_abs()))?;
    Ok(format!("{} goldens in both modes, clipped gradient exactly 0", goldens.len()))
}

fn kl_semantics() -> Outcome {
    let (prompt, tokens) = SEQS[0];
    let seq = [SequenceRef { prompt, tokens }];
    let b = GrpoBatch { sequences: seq.to_vec(), old_logps: vec![0.0], advantages: vec![0.0] };
    let mut min_kl = f64::INFINITY;
    for i in 0..10_000u64 {
        let p = small_policy(i, "kl.p");
        let r = small_policy(i, "kl.ref");
        let kl = evaluate_loss(&p, &LossSpec::Kl { batch: &b, reference: &r, estimator: KlEstimator::ExactPerToken })
            .unwrap()
            .kl;
        min_kl = min_kl.min(kl);
        if i < 100 {
            let same = evaluate_loss(&p, &LossSpec::Kl { batch: &b, reference: &p, estimator: KlEstimator::ExactPerToken })
                .unwrap()
                .kl;
            check(same == 0.0, || format!("kl at reference {same:e}"))?;
        }
    }
    check(min_kl >= 0.0, || format!("negative kl {min_kl:e}"))?;

    let one_hot = Distribution::from_logits(&[0.0, -1000.0, -1000.0, -1000.0], None);
    let uniform = Distribution::from_logits(&[0.0; 4], None);
    let (ln4, _) = kl_exact_position(&one_hot, &uniform);
    check((ln4 - 4f64.ln()).abs() <= 1e-9, || format!("one-hot vs uniform {ln4}"))?;

    let mut rng = RngStream::named(5, "kl.k3", &[]);
    let logits = |rng: &mut RngStream| (0..10).map(|_| rng.uniform(-1.5, 1.5)).collect::<Vec<_>>();
    let p = Distribution::from_logits(&logits(&mut rng), None);
    let q = Distribution::from_logits(&logits(&mut rng), None);
    let (exact, _) = kl_exact_position(&p, &q);
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|_| k3_position(&p, &q, p.sample(&mut rng)).0).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd / (n as f64).sqrt();
    check((mean - exact).abs() <= 3.0 * se, || format!("k3 {mean} vs exact {exact} (se {se})"))?;
    Ok(format!("min kl {min_kl:.2e} over 10000 pairs, k3 {mean:.5} vs exact {exact:.5} (3se {:.5})", 3.0 * se))
}

fn reward_grammar() -> Outcome {
    let corpus = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reward_corpus.tsv")).unwrap();
    let vocab: Vocab = build_vocab(&[
        "A", "B", "C", "D", "a)", "b.", "x", "y", "z", "maybe", "E", "normal", "benign", "malignant", "inflamed",
    ])
    .unwrap();
    let choices: Vec<Choice> = ["normal", "benign", "malignant", "inflamed"]
        .iter()
        .enumerate()
        .map(|(i, t)| Choice { letter: Letter::from_index(i).unwrap(), text: t.to_string() })
        .collect();
    let cfg = RewardConfig::default();
    let mut classes = BTreeMap::new();
    for (n, line) in corpus.lines().skip(1).enumerate() {
        let cols: Vec<&str> = line.splitn(6, '\t').collect();
        let [class, gold, acc, fmt, rep, raw] = cols[..] else { return Err(format!("bad corpus line {n}")) };
        let tokens = vocab.encode(raw).unwrap();
        let got = composite_reward(&tokens, gold.parse().unwrap(), &choices, &vocab, &cfg);
        let want: [f64; 3] = [acc.parse().unwrap(), fmt.parse().unwrap(), rep.parse().unwrap()];
        let have = [got.r_acc, got.r_fmt, got.r_rep];
        check(have.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()), || {
            format!("case {n} {class} {raw:?}: {have:?} != {want:?}")
        })?;
        check(got.total == got.r_acc + got.r_fmt + got.r_rep, || format!("case {n}: total {}", got.total))?;
        *classes.entry(class).or_insert(0) += 1;
    }
    let cases: usize = classes.values().sum();
    check(cases == 40, || format!("{cases} cases"))?;
    for class in ["missing_tag", "duplicated_tag", "nested_tag", "tag_in_body", "trailing_junk", "empty_bodies"] {
        check(classes.contains_key(class), || format!("no {class} cases"))?;
    }
    Ok(format!("{cases} cases bit-exact across {} classes", classes.len()))
}

/// Config for a run on the 4-choice task without the shortcut.
fn toy_config(dir: &Path, batch_size: usize, max_steps: u64) -> String {
    let text = format!(
        "seed = 0\nout = {out:?}\n\
         [synth]\np_train = 0.0\np_ood = 0.0\nn_train = 500\nn_iid_test = 192\nn_ood_test = 192\n\
         [policy]\ninit_scale = 0.5\n\
         [warmup]\nepochs = 40\nlr = 1e-2\nbatch_size = 32\n\
         [rlt]\nlr = 3e-3\nbatch_size = {batch_size}\nepochs = 1000\nmax_steps = {max_steps}\n",
        out = dir.join("run").to_str().unwrap(),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

struct Loaded {
    vocab: Vocab,
    records: Vec<DatasetRecord>,
}

fn load_data(run: &Path) -> Loaded {
    let vocab: Vocab = serde_json::from_str(&fs::read_to_string(run.join("data/vocab.json")).unwrap()).unwrap();
    let records = rltune::records::load_records(&run.join("data/records.jsonl")).unwrap();
    Loaded { vocab, records }
}

/// Mean greedy r_acc and r_fmt on the iid test split.
fn greedy_rewards(p: &PolicyParams, data: &Loaded) -> (f64, f64) {
    let test: Vec<DatasetRecord> = data.records.iter().filter(|r| r.task.split == Split::IidTest).cloned().collect();
    let tasks = prepare_tasks(&test, &data.vocab, Strategy::Cot).unwrap();
    let (mut acc, mut fmt) = (0.0, 0.0);
    for t in &tasks {
        let c = greedy_completion(p, &t.prompt, p.cfg.max_gen_len).unwrap();
        let r = composite_reward(&c.tokens, t.task.gold, &t.task.choices, &data.vocab, &RewardConfig::default());
        acc += r.r_acc;
        fmt += r.r_fmt;
    }
    (acc / tasks.len() as f64, fmt / tasks.len() as f64)
}

fn reward_column(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

fn toy_convergence(dir: &Path) -> Outcome {
    let cfg = toy_config(dir, 8, 800);
    let t0 = Instant::now();
    check(cli(&["synth", "-c", &cfg]) == 0, || "synth failed".into())?;
    check(cli(&["train-rlt", "-c", &cfg]) == 0, || "train-rlt failed".into())?;
    let took = t0.elapsed();
    let run = dir.join("run");
    let data = load_data(&run);
    let (base_acc, base_fmt) = greedy_rewards(&load_checkpoint(&run.join("rlt/base.ckpt")).unwrap(), &data);
    let (acc, fmt) = greedy_rewards(&load_checkpoint(&run.join("rlt/final.ckpt")).unwrap(), &data);
    let rewards = reward_column(&fs::read_to_string(run.join("rlt/metrics.csv")).unwrap());
    let windows: Vec<f64> = rewards.chunks_exact(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
    let rising = windows.windows(2).filter(|w| w[1] >= w[0]).count();
    let pairs = windows.len() - 1;
    let summary = format!(
        "base acc {base_acc:.3} fmt {base_fmt:.3}; after {} steps acc {acc:.3} fmt {fmt:.3}; windows {rising}/{pairs} nondecreasing; {:.1}s",
        rewards.len(),
        took.as_secs_f64()
    );
    check((base_acc - 0.25).abs() <= 0.04, || format!("baseline off chance: {summary}"))?;
    check(acc >= 0.90 && fmt >= 0.95, || format!("did not converge: {summary}"))?;
    check(rewards.len() <= 2000, || format!("too many steps: {summary}"))?;
    check(rising as f64 >= 0.9 * pairs as f64, || format!("reward not rising: {summary}"))?;
    check(took < Duration::from_secs(600), || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".ckpt"))
        .map(|n| (n.clone(), fs::read(dir.join(&n)).unwrap()))
        .collect()
}

fn determinism(dir: &Path) -> Outcome {
    let first = dir.join("run/rlt");
    check(first.join("metrics.csv").is_file(), || "criterion 6 run missing".into())?;
    let cfg = dir.join("run.toml");
    let again = dir.join("again");
    let data = dir.join("run/data");
    let records = format!("data.records={:?}", data.join("records.jsonl").to_str().unwrap());
    let vocab = format!("data.vocab={:?}", data.join("vocab.json").to_str().unwrap());
    let code = cli(&[
        "train-rlt", "-c", cfg.to_str().unwrap(), "--out", again.to_str().unwrap(), "--set", &records, "--set", &vocab,
    ]);
    check(code == 0, || "second run failed".into())?;
    let (a, b) = (files(&first), files(&again.join("rlt")));
    check(a.keys().eq(b.keys()), || format!("{:?} vs {:?}", a.keys(), b.keys()))?;
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k).collect();
    check(differing.is_empty(), || format!("differs: {differing:?}"))?;
    check(cli(&["replay", first.to_str().unwrap()]) == 0, || "replay reported diffs".into())?;
    Ok(format!("{} files byte-identical, replay 0 diffs", a.len()))
}

fn checkpoint_stability(dir: &Path) -> Outcome {
    let cfg = toy_config(dir, 32, 165);
    check(cli(&["synth", "-c", &cfg]) == 0, || "synth failed".into())?;
    check(cli(&["train-rlt", "-c", &cfg]) == 0, || "train-rlt failed".into())?;
    let run = dir.join("run");
    let data = load_data(&run);
    let iid = BenchmarkManifest::from_split(&data.records, Split::IidTest).unwrap();
    let mut accs = Vec::new();
    for step in [0u64, 10, 20, 100, 165] {
        let p = load_checkpoint(&run.join(format!("rlt/step_{step:06}.ckpt"))).unwrap();
        accs.push((step, evaluate(&p, &iid, Strategy::Cot, &data.vocab).unwrap().accuracy));
    }
    let shown = accs.iter().map(|(s, a)| format!("{s}:{a}")).collect::<Vec<_>>().join(" ");
    for (i, (si, ai)) in accs.iter().enumerate() {
        for (sj, aj) in &accs[i + 1..] {
            check(aj.hundredths() >= ai.hundredths() - 300, || format!("step {sj} below step {si} - 3pp: {shown}"))?;
        }
    }
    Ok(shown)
}

fn data_pipeline() -> Outcome {
    let spec = SynthSpec::default();
    let mut requests = Vec::new();
    for m in ["ct", "mri", "xray", "ultrasound"] {
        for k in ["anatomy", "pathology", "diagnosis"] {
            let seed = stream_key("synth.request", &[0, requests.len() as u64]);
            requests.push(rltune::dataforge::generator::GeneratorRequest {
                modality: m.into(),
                knowledge: k.into(),
                answer_set: spec.answer_set.clone(),
                seed,
            });
        }
    }
    let mock = MockGenerator::new(MockMode::Rate(0.2), 0);
    let out = rejection_sample(&mock, &requests, &Rule::ALL, 1000, 10_000, 8).map_err(|e| e.to_string())?;
    check(out.accepted.len() == 1000, || format!("{} accepted", out.accepted.len()))?;
    for a in &out.accepted {
        check(validate_candidate(&a.candidate, &a.request) == Verdict::Accept, || format!("attempt {} fails", a.attempt))?;
        check(candidate_to_record(a, Split::Train).is_some(), || format!("attempt {} is not a record", a.attempt))?;
        check(mock.injected(&a.request).is_none(), || format!("attempt {} had a defect", a.attempt))?;
    }
    let mut injected: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..out.attempts {
        if let Some(m) = mock.injected(&attempt_request(&requests, i)) {
            *injected.entry(m.expected_reason()).or_default() += 1;
        }
    }
    let mut logged: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &out.rejections {
        let m = mock.injected(&attempt_request(&requests, r.attempt));
        check(m.map(|m| m.expected_reason()) == Some(r.reason.as_str()), || {
            format!("attempt {} logged {} but injected {m:?}", r.attempt, r.reason)
        })?;
        *logged.entry(r.reason.as_str()).or_default() += 1;
    }
    check(logged == injected, || format!("logged {logged:?} vs injected {injected:?}"))?;

    let records = generate_synthetic_tasks(&SynthSpec { p_train: 0.0, ..SynthSpec::default() }).unwrap();
    let (mut train, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.task.split == Split::Train);
    let mut rng = RngStream::named(0, "acceptance.plant", &[]);
    let mut planted = HashSet::new();
    for (i, src) in test.iter().step_by(4).enumerate() {
        let mut dup = src.clone();
        dup.task.id = format!("planted-{i}");
        dup.task.split = Split::Train;
        if i % 2 == 1 {
            let gold_text = dup.task.gold_text().to_string();
            let mut texts: Vec<String> = dup.task.choices.iter().map(|c| c.text.clone()).collect();
            while texts.iter().zip(&dup.task.choices).all(|(t, c)| *t == c.text) {
                rng.shuffle(&mut texts);
            }
            for (c, t) in dup.task.choices.iter_mut().zip(texts) {
                c.text = t;
            }
            dup.task.gold = dup.task.choices.iter().find(|c| c.text == gold_text).unwrap().letter;
            dup.task.prompt = format!("  {}  ", dup.task.prompt.to_uppercase());
        }
        planted.insert(dup.task.id.clone());
        train.push(dup);
    }
    let banned: HashSet<String> = test.iter().map(|r| overlap_key(&r.task)).collect();
    let before = train.len();
    let (kept, removed) = blacklist_filter(train.clone(), &test);
    let survivors = kept.iter().filter(|r| planted.contains(&r.task.id)).count();
    check(survivors == 0, || format!("{survivors} planted duplicates survived"))?;
    let kept_ids: HashSet<&str> = kept.iter().map(|r| r.task.id.as_str()).collect();
    for r in train.iter().filter(|r| !kept_ids.contains(r.task.id.as_str())) {
        check(banned.contains(&overlap_key(&r.task)), || format!("{} removed without overlap", r.task.id))?;
    }
    Ok(format!(
        "1000 accepted in {} attempts, rejections {logged:?}; {} planted of which {} permuted, all removed ({removed} of {before} dropped)",
        out.attempts,
        planted.len(),
        planted.len() / 2
    ))
}

fn shortcut_pipeline(dir: &Path) -> Outcome {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = cfg.to_str().unwrap();
    let out = dir.join("toy");
    let out = out.to_str().unwrap();
    for cmd in ["synth", "train-sft", "train-rlt", "compare"] {
        check(cli(&[cmd, "-c", cfg, "--out", out]) == 0, || format!("{cmd} failed"))?;
    }
    let run = Path::new(out);
    let table = fs::read_to_string(run.join("compare/table.txt")).unwrap();
    check(table.lines().filter(|l| l.starts_with('Δ')).count() == 2, || "missing delta rows".into())?;
    let data = load_data(run);
    let iid = BenchmarkManifest::from_split(&data.records, Split::IidTest).unwrap();
    let sft = evaluate(&load_checkpoint(&run.join("sft/final.ckpt")).unwrap(), &iid, Strategy::Cot, &data.vocab).unwrap();
    check(sft.accuracy.hundredths() >= 9000, || format!("sft iid {}", sft.accuracy))?;
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("compare/table.json")).unwrap()).unwrap();
    Ok(format!("sft iid {}; ood rlt minus sft {} (reported)", sft.accuracy, report["rlt_minus_sft_ood"].as_str().unwrap_or("?")))
}

fn eval_goldens() -> Outcome {
    let cases = [
        (Percent::from_counts(86, 150).to_string(), "57.33"),
        (delta(Percent(5533), Percent(5733)).to_string(), "+2.00"),
        (delta(Percent(2847), Percent(3403)).to_string(), "+5.56"),
    ];
    for (got, want) in &cases {
        check(got == want, || format!("{got} != {want}"))?;
    }
    Ok("57.33, +2.00, +5.56".into())
}

fn main() {
    let toy = tempfile::tempdir().unwrap();
    let stability = tempfile::tempdir().unwrap();
    let pipeline = tempfile::tempdir().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("advantage invariant", Box::new(advantage_invariant)),
        ("surrogate semantics", Box::new(surrogate_semantics)),
        ("kl semantics", Box::new(kl_semantics)),
        ("reward grammar", Box::new(reward_grammar)),
        ("toy convergence", Box::new(|| toy_convergence(toy.path()))),
        ("determinism", Box::new(|| determinism(toy.path()))),
        ("checkpoint stability", Box::new(|| checkpoint_stability(stability.path()))),
        ("data pipeline", Box::new(data_pipeline)),
        ("shortcut pipeline", Box::new(|| shortcut_pipeline(pipeline.path()))),
        ("eval goldens", Box::new(eval_goldens)),
    ];
    let mut lines = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let line = match &result {
            Ok(d) => format!("criterion {:>2} {name}: PASS ({d})", i + 1),
            Err(d) => format!("criterion {:>2} {name}: FAIL ({d})", i + 1),
        };
        println!("{line}");
        lines.push((line, result.is_ok()));
    }
    println!("\nacceptance summary");
    for (line, _) in &lines {
        println!("{line}");
    }
    let failed = lines.iter().filter(|(_, ok)| !ok).count();
    println!("{} of {} criteria pass", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
