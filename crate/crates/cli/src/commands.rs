//! Subcommand bodies. Each one locks its own directory under the run root
//! and finishes by writing a manifest there.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use rltune::dataforge::curate::{
    attach_cot, attempt_request, blacklist_filter, candidate_to_record, rejection_sample, Rule,
};
use rltune::dataforge::generator::{
    GeneratorClient, GeneratorRequest, MockGenerator, MockMode, RemoteGenerator, ReplayGenerator,
};
use rltune::dataforge::synth::{generate_synthetic_tasks, synth_vocab};
use rltune::eval::{run_inference, score_report, shortcut_experiment, BenchmarkManifest, Percent};
use rltune::policy::{init_policy, load_checkpoint, save_checkpoint, PolicyParams};
use rltune::prompting::{Strategy, SYSTEM_PREAMBLE};
use rltune::records::{load_records, save_records, DatasetRecord, Letter, Split};
use rltune::rng::{stream_key, RngStream};
use rltune::tuner::{format_warmup, prepare_tasks, run_rlt, run_sft, sft_examples, PreparedTask};
use rltune::vocab::{build_vocab, normalize_spacing, Vocab, RESERVED};

use crate::config::{MockKind, RunConfig, Source};
use crate::error::{io_err, CliError};
use crate::run_dir::{hash_outputs, read_manifest, write_manifest, RunDir, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    TrainSft,
    TrainRlt,
    Eval,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainSft => "train-sft",
            Command::TrainRlt => "train-rlt",
            Command::Eval => "eval",
            Command::Compare => "compare",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Command::Synth, Command::TrainSft, Command::TrainRlt, Command::Eval, Command::Compare]
            .into_iter()
            .find(|c| c.name() == s)
    }

    /// Directory under the run root that the command writes.
    pub fn subdir(self) -> &'static str {
        match self {
            Command::Synth => "data",
            Command::TrainSft => "sft",
            Command::TrainRlt => "rlt",
            Command::Eval => "eval",
            Command::Compare => "compare",
        }
    }
}

pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<RunManifest, CliError> {
    match cmd {
        Command::Synth => cmd_synth(cfg),
        Command::TrainSft => cmd_train_sft(cfg),
        Command::TrainRlt => cmd_train_rlt(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Compare => cmd_compare(cfg),
    }
}

fn require(key: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingRequired { key: key.to_string(), path: Some(path.to_path_buf()) })
    }
}

fn read_vocab(path: &Path) -> Result<Vocab, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::InvalidValue { key: "data.vocab".into(), message: e.to_string() })
}

fn write_json<T: Serialize>(dir: &RunDir, name: &str, v: &T) -> Result<PathBuf, CliError> {
    dir.write(name, serde_json::to_string_pretty(v).expect("serialization is infallible") + "\n")
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("serialization is infallible") + "\n").collect()
}

/// Loaded dataset and vocabulary for the training and evaluation commands.
struct Inputs {
    records: Vec<DatasetRecord>,
    vocab: Vocab,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs, CliError> {
    require("data.records", &cfg.records)?;
    require("data.vocab", &cfg.vocab)?;
    Ok(Inputs { records: load_records(&cfg.records)?, vocab: read_vocab(&cfg.vocab)? })
}

fn train_tasks(inp: &Inputs) -> Result<(Vec<PreparedTask>, Vec<Option<String>>), CliError> {
    let train: Vec<DatasetRecord> = inp.records.iter().filter(|r| r.task.split == Split::Train).cloned().collect();
    let cots = train.iter().map(|r| r.cot.clone()).collect();
    Ok((prepare_tasks(&train, &inp.vocab, Strategy::Cot)?, cots))
}

fn load_policy(key: &str, path: &Path, vocab: &Vocab) -> Result<PolicyParams, CliError> {
    require(key, path)?;
    let p = load_checkpoint(path)?;
    if p.cfg.vocab_size != vocab.len() {
        return Err(CliError::InvalidValue {
            key: key.to_string(),
            message: format!("checkpoint vocab size {} but vocabulary has {}", p.cfg.vocab_size, vocab.len()),
        });
    }
    Ok(p)
}

/// The starting policy: a checkpoint when `init` is set, otherwise a fresh
/// initialization followed by the format warm-up on the train split.
fn starting_policy(
    cfg: &RunConfig,
    init: Option<(&str, &Path)>,
    vocab: &Vocab,
    train: &[PreparedTask],
) -> Result<(PolicyParams, bool), CliError> {
    if let Some((key, path)) = init {
        return Ok((load_policy(key, path, vocab)?, false));
    }
    let pc = cfg.policy.for_vocab(vocab.len());
    let p0 = init_policy(pc, &mut RngStream::named(cfg.seed, "policy.init", &[]))?;
    eprintln!("warm-up: {} epochs on {} tasks", cfg.warmup.epochs, train.len());
    Ok((format_warmup(&cfg.warmup, train, p0, vocab)?.params, true))
}

#[derive(Debug, Serialize)]
struct Share {
    count: usize,
    percent: Percent,
}

fn shares<'a>(keys: impl Iterator<Item = &'a str>) -> BTreeMap<String, Share> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for k in keys {
        *counts.entry(k.to_string()).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(k, count)| (k, Share { count, percent: Percent::from_counts(count as u64, total as u64) }))
        .collect()
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    source: Source,
    total: usize,
    splits: BTreeMap<String, Share>,
    families: BTreeMap<String, Share>,
    attempts: usize,
    rejections: BTreeMap<String, usize>,
    /// Defects the mock generator planted, by the rule expected to catch them.
    injected: Option<BTreeMap<String, usize>>,
    cot_kept: usize,
    cot_dropped: BTreeMap<String, usize>,
    blacklist_removed: usize,
}

impl SynthSummary {
    fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "records {} (source {:?}, attempts {})", self.total, self.source, self.attempts).unwrap();
        for (title, m) in [("split", &self.splits), ("family", &self.families)] {
            for (k, v) in m {
                writeln!(s, "{title:<8} {k:<16} {:>6} {:>7}%", v.count, v.percent.to_string()).unwrap();
            }
        }
        for (k, v) in &self.rejections {
            writeln!(s, "rejected {k:<28} {v:>6}").unwrap();
        }
        for (k, v) in &self.cot_dropped {
            writeln!(s, "cot drop {k:<28} {v:>6}").unwrap();
        }
        writeln!(s, "cot kept {}", self.cot_kept).unwrap();
        writeln!(s, "blacklist removed {}", self.blacklist_removed).unwrap();
        s
    }
}

#[derive(Debug, Serialize)]
struct CotDrop<'a> {
    id: &'a str,
    reason: &'a str,
}

fn mock_generator(cfg: &RunConfig) -> MockGenerator {
    let g = &cfg.synth.generator;
    let mode = match g.mock {
        MockKind::Rate => MockMode::Rate(g.malformation_rate),
        MockKind::Alternating => MockMode::Alternating,
        MockKind::AlwaysInvalid => MockMode::AlwaysInvalid(g.malformation),
    };
    MockGenerator::new(mode, cfg.seed)
}

fn generator_client(cfg: &RunConfig) -> Result<Box<dyn GeneratorClient>, CliError> {
    let g = &cfg.synth.generator;
    Ok(match cfg.synth.source {
        Source::Synthetic | Source::Mock => Box::new(mock_generator(cfg)),
        Source::Remote => {
            let url = g
                .url
                .as_deref()
                .ok_or_else(|| CliError::MissingRequired { key: "synth.generator.url".into(), path: None })?;
            Box::new(RemoteGenerator::new(url, Duration::from_millis(g.timeout_ms), g.retries))
        }
        Source::Replay => {
            let dir = g
                .fixtures
                .as_deref()
                .ok_or_else(|| CliError::MissingRequired { key: "synth.generator.fixtures".into(), path: None })?;
            if !dir.is_dir() {
                return Err(CliError::MissingRequired { key: "synth.generator.fixtures".into(), path: Some(dir.into()) });
            }
            Box::new(ReplayGenerator::load_dir(dir)?)
        }
    })
}

fn generator_requests(cfg: &RunConfig) -> Vec<GeneratorRequest> {
    let g = &cfg.synth.generator;
    let mut out = Vec::new();
    for m in &g.modalities {
        for k in &g.knowledge {
            let i = out.len() as u64;
            out.push(GeneratorRequest {
                modality: m.clone(),
                knowledge: k.clone(),
                answer_set: cfg.synth.spec.answer_set.clone(),
                seed: stream_key("synth.request", &[cfg.seed, i]),
            });
        }
    }
    out
}

/// Vocabulary covering every word of the records plus the preamble and
/// all choice letters.
pub fn records_vocab(records: &[DatasetRecord]) -> Result<Vocab, CliError> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    let mut add = |text: &str| {
        for w in normalize_spacing(text).split_whitespace() {
            if !RESERVED.contains(&w) {
                words.insert(w.to_string());
            }
        }
    };
    for r in records {
        add(&r.task.prompt);
        for c in &r.task.choices {
            add(&c.text);
        }
        if let Some(c) = &r.cot {
            add(c);
        }
    }
    let mut tokens: Vec<String> = (0..4).filter_map(Letter::from_index).map(|l| l.to_string()).collect();
    tokens.extend(SYSTEM_PREAMBLE.iter().map(|s| s.to_string()));
    for w in &tokens {
        words.remove(w);
    }
    tokens.extend(words);
    Ok(build_vocab(&tokens)?)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let dir = RunDir::open(&cfg.dir(Command::Synth.subdir()))?;
    if let Some(p) = &cfg.synth.test_records {
        require("synth.test_records", p)?;
    }
    let client = generator_client(cfg)?;
    let mut rejections = Vec::new();
    let mut attempts = 0;
    let mut injected = None;

    let mut records = match cfg.synth.source {
        Source::Synthetic => generate_synthetic_tasks(&cfg.synth.spec)
            .map_err(|m| CliError::InvalidValue { key: "synth".into(), message: m })?,
        _ => {
            let g = &cfg.synth.generator;
            let requests = generator_requests(cfg);
            let outcome = rejection_sample(client.as_ref(), &requests, &Rule::ALL, g.target_n, g.max_attempts, g.in_flight);
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => {
                    if let rltune::dataforge::curate::CurateError::Exhausted { outcome, .. } = &e {
                        dir.write("rejections.jsonl", jsonl(&outcome.rejections))?;
                    }
                    return Err(e.into());
                }
            };
            attempts = outcome.attempts;
            if cfg.synth.source == Source::Mock {
                let mock = mock_generator(cfg);
                let mut m: BTreeMap<String, usize> = BTreeMap::new();
                for i in 0..outcome.attempts {
                    if let Some(d) = mock.injected(&attempt_request(&requests, i)) {
                        *m.entry(d.expected_reason().to_string()).or_default() += 1;
                    }
                }
                injected = Some(m);
            }
            let mut recs = Vec::new();
            for a in &outcome.accepted {
                match candidate_to_record(a, Split::Train) {
                    Some(r) => recs.push(r),
                    None => rejections.push(rltune::dataforge::curate::Rejection {
                        attempt: a.attempt,
                        request_seed: a.request.seed,
                        reason: "unconvertible".into(),
                        raw: Some(a.candidate.to_json()),
                    }),
                }
            }
            rejections.splice(0..0, outcome.rejections);
            recs
        }
    };

    let mut cot_dropped: BTreeMap<String, usize> = BTreeMap::new();
    let mut drops = Vec::new();
    if cfg.synth.cot {
        for r in records.iter_mut().filter(|r| r.task.split == Split::Train) {
            let (with, reason) = attach_cot(r, client.as_ref())?;
            if let Some(reason) = reason {
                *cot_dropped.entry(reason.to_string()).or_default() += 1;
                drops.push((r.task.id.clone(), reason));
            }
            *r = with;
        }
    }

    let mut blacklist_removed = 0;
    if cfg.synth.blacklist {
        let mut tests: Vec<DatasetRecord> = records.iter().filter(|r| r.task.split != Split::Train).cloned().collect();
        if let Some(p) = &cfg.synth.test_records {
            tests.extend(load_records(p)?);
        }
        let (train, others): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.task.split == Split::Train);
        let (kept, removed) = blacklist_filter(train, &tests);
        blacklist_removed = removed;
        records = kept.into_iter().chain(others).collect();
    }

    let vocab = match cfg.synth.source {
        Source::Synthetic => synth_vocab(&cfg.synth.spec)?,
        _ => records_vocab(&records)?,
    };
    save_records(&records, &dir.file("records.jsonl"))?;
    write_json(&dir, "vocab.json", &vocab)?;
    dir.write("rejections.jsonl", jsonl(&rejections))?;
    let drops: Vec<CotDrop> = drops.iter().map(|(id, reason)| CotDrop { id, reason }).collect();
    dir.write("cot_rejections.jsonl", jsonl(&drops))?;

    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    for r in &rejections {
        *reasons.entry(r.reason.clone()).or_default() += 1;
    }
    let summary = SynthSummary {
        source: cfg.synth.source,
        total: records.len(),
        splits: shares(records.iter().map(|r| r.task.split.as_str())),
        families: shares(records.iter().map(|r| r.task.family.as_str())),
        attempts,
        rejections: reasons,
        injected,
        cot_kept: records.iter().filter(|r| r.cot.is_some()).count(),
        cot_dropped,
        blacklist_removed,
    };
    write_json(&dir, "summary.json", &summary)?;
    let text = summary.to_text();
    dir.write("summary.txt", &text)?;
    print!("{text}");
    let inputs: Vec<&Path> = cfg.synth.test_records.iter().map(PathBuf::as_path).collect();
    write_manifest(&dir, Command::Synth.name(), cfg, &inputs)
}

pub fn cmd_train_sft(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let inp = load_inputs(cfg)?;
    let init = cfg.sft_init.as_deref().map(|p| ("sft.init", p));
    let dir = RunDir::open(&cfg.dir(Command::TrainSft.subdir()))?;
    let (tasks, cots) = train_tasks(&inp)?;
    let examples = sft_examples(&tasks, &cots, &inp.vocab)?;
    let (base, built) = starting_policy(cfg, init, &inp.vocab, &tasks)?;
    if built {
        save_checkpoint(&base, &dir.file("base.ckpt"))?;
    }
    eprintln!("train-sft: {} examples, {} epochs", examples.len(), cfg.sft.epochs);
    let out = run_sft(&cfg.sft, &examples, base)?;
    let mut csv = String::from("step,loss\n");
    for r in &out.rows {
        writeln!(csv, "{},{}", r.step, r.loss).unwrap();
    }
    dir.write("sft_metrics.csv", csv)?;
    save_checkpoint(&out.params, &dir.file("final.ckpt"))?;
    if let Some(last) = out.rows.last() {
        eprintln!("train-sft: step {} loss {:.5}", last.step, last.loss);
    }
    let mut inputs = vec![cfg.records.as_path(), cfg.vocab.as_path()];
    inputs.extend(cfg.sft_init.as_deref());
    write_manifest(&dir, Command::TrainSft.name(), cfg, &inputs)
}

pub fn cmd_train_rlt(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let inp = load_inputs(cfg)?;
    let init = cfg.rlt_init.as_deref().map(|p| ("rlt.init", p));
    let dir = RunDir::open(&cfg.dir(Command::TrainRlt.subdir()))?;
    let (tasks, _) = train_tasks(&inp)?;
    let (base, built) = starting_policy(cfg, init, &inp.vocab, &tasks)?;
    if built {
        save_checkpoint(&base, &dir.file("base.ckpt"))?;
    }
    let total = cfg.rlt.total_steps(tasks.len());
    eprintln!("train-rlt: {} tasks, {total} steps", tasks.len());
    let out = run_rlt(&cfg.rlt, &tasks, base, &inp.vocab, Some(&dir.path), |r| {
        if r.step % 50 == 0 || r.step == total {
            eprintln!(
                "train-rlt: step {} reward {:.3} r_acc {:.3} r_fmt {:.3} kl {:.5}",
                r.step, r.mean_reward, r.mean_r_acc, r.mean_r_fmt, r.kl
            );
        }
    })?;
    eprintln!("train-rlt: {} checkpoints", out.checkpoints.len());
    let mut inputs = vec![cfg.records.as_path(), cfg.vocab.as_path()];
    inputs.extend(cfg.rlt_init.as_deref());
    write_manifest(&dir, Command::TrainRlt.name(), cfg, &inputs)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let inp = load_inputs(cfg)?;
    let params = load_policy("eval.checkpoint", &cfg.eval.checkpoint, &inp.vocab)?;
    let dir = RunDir::open(&cfg.dir(Command::Eval.subdir()))?;
    let e = &cfg.eval;
    for split in &e.splits {
        let manifest = BenchmarkManifest::from_split(&inp.records, *split)?;
        let outputs = run_inference(&params, &manifest, e.strategy, &inp.vocab, e.decoding)?;
        let mut report = score_report(&outputs, &manifest, e.strategy)?;
        report.length_histogram = rltune::eval::length_stats(&outputs, e.bucket_width);
        let name = split.as_str();
        dir.write(&format!("report_{name}.json"), report.to_json() + "\n")?;
        let text = report.to_text();
        dir.write(&format!("report_{name}.txt"), &text)?;
        dir.write(&format!("lengths_{name}.csv"), report.length_histogram.to_csv())?;
        dir.write(&format!("outputs_{name}.jsonl"), jsonl(&outputs))?;
        print!("{text}");
    }
    write_manifest(&dir, Command::Eval.name(), cfg, &[&cfg.records, &cfg.vocab, &cfg.eval.checkpoint])
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let inp = load_inputs(cfg)?;
    let c = &cfg.compare;
    let base = load_policy("compare.base", &c.base, &inp.vocab)?;
    let sft = load_policy("compare.sft", &c.sft, &inp.vocab)?;
    let rlt = load_policy("compare.rlt", &c.rlt, &inp.vocab)?;
    let dir = RunDir::open(&cfg.dir(Command::Compare.subdir()))?;
    let iid = BenchmarkManifest::from_split(&inp.records, Split::IidTest)?;
    let ood = BenchmarkManifest::from_split(&inp.records, Split::OodTest)?;
    let exp = shortcut_experiment([("base", &base), ("sft", &sft), ("rlt", &rlt)], &iid, &ood, c.strategy, &inp.vocab)?;
    let text = exp.to_text();
    dir.write("table.txt", &text)?;
    write_json(&dir, "table.json", &exp)?;
    print!("{text}");
    write_manifest(&dir, Command::Compare.name(), cfg, &[&cfg.records, &cfg.vocab, &c.base, &c.sft, &c.rlt])
}

/// Per-file comparison of two output sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayDiff {
    pub compared: usize,
    pub differing: Vec<String>,
}

fn diff_outputs(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> ReplayDiff {
    let names: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let differing = names.iter().filter(|n| a.get(**n) != b.get(**n)).map(|n| n.to_string()).collect();
    ReplayDiff { compared: names.len(), differing }
}

/// Re-executes the run recorded in `run_dir` into a scratch directory and
/// compares every output file, or compares against `against` when given.
pub fn cmd_replay(run_dir: &Path, against: Option<&Path>) -> Result<ReplayDiff, CliError> {
    let manifest = read_manifest(run_dir)?;
    let recorded = hash_outputs(run_dir)?;
    let diff = match against {
        Some(other) => {
            read_manifest(other)?;
            diff_outputs(&recorded, &hash_outputs(other)?)
        }
        None => {
            let cmd = Command::from_name(&manifest.command).ok_or_else(|| CliError::BadManifest {
                path: run_dir.to_path_buf(),
                message: format!("unknown command {:?}", manifest.command),
            })?;
            for (p, h) in &manifest.inputs {
                if crate::run_dir::file_sha256(p).ok().as_ref() != Some(h) {
                    eprintln!("replay: input {} changed since the run", p.display());
                }
            }
            let scratch = tempfile::Builder::new()
                .prefix(".replay-")
                .tempdir_in(run_dir)
                .map_err(io_err(run_dir))?;
            let mut cfg = manifest.config.clone();
            cfg.out = scratch.path().to_path_buf();
            let again = execute(cmd, &cfg)?;
            if again.config_hash != manifest.config_hash {
                eprintln!("replay: config hash changed");
            }
            diff_outputs(&recorded, &hash_outputs(&cfg.dir(cmd.subdir()))?)
        }
    };
    for n in &diff.differing {
        println!("differs {n}");
    }
    println!("replay: {} outputs compared, {} diffs", diff.compared, diff.differing.len());
    Ok(diff)
}
