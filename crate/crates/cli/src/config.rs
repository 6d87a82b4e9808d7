//! Run configuration: one TOML file plus `--set section.key=value`
//! overrides. Every key is consumed exactly once; leftovers are errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use rltune::dataforge::generator::Malformation;
use rltune::dataforge::synth::SynthSpec;
use rltune::eval::{Decoding, DEFAULT_BUCKET_WIDTH};
use rltune::policy::{hex_digest, LrSchedule, OptimizerMode, PolicyConfig};
use rltune::prompting::Strategy;
use rltune::records::Split;
use rltune::tuner::{RltConfig, SftConfig, WarmupConfig};

use crate::error::CliError;

static EMPTY: LazyLock<Table> = LazyLock::new(Table::new);

/// Where `synth` gets its records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Mock,
    Remote,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    Rate,
    Alternating,
    AlwaysInvalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub mock: MockKind,
    pub malformation_rate: f64,
    /// Defect used by `always_invalid`.
    pub malformation: Malformation,
    pub target_n: usize,
    pub max_attempts: usize,
    pub in_flight: usize,
    pub modalities: Vec<String>,
    pub knowledge: Vec<String>,
    pub url: Option<String>,
    pub timeout_ms: u64,
    pub retries: usize,
    pub fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    pub source: Source,
    pub spec: SynthSpec,
    /// Request and keep rationales for train records.
    pub cot: bool,
    /// Drop train records that duplicate a test record.
    pub blacklist: bool,
    /// Extra records whose duplicates are removed from the output.
    pub test_records: Option<PathBuf>,
    pub generator: GeneratorSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub max_gen_len: usize,
    pub init_scale: f64,
}

impl PolicySettings {
    pub fn for_vocab(&self, vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            context_window: self.context_window,
            max_gen_len: self.max_gen_len,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub splits: Vec<Split>,
    pub strategy: Strategy,
    pub decoding: Decoding,
    pub bucket_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSettings {
    pub base: PathBuf,
    pub sft: PathBuf,
    pub rlt: PathBuf,
    pub strategy: Strategy,
}

/// Fully resolved configuration. Paths are absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub records: PathBuf,
    pub vocab: PathBuf,
    pub synth: SynthSettings,
    pub policy: PolicySettings,
    pub warmup: WarmupConfig,
    pub sft: SftConfig,
    pub sft_init: Option<PathBuf>,
    pub rlt: RltConfig,
    pub rlt_init: Option<PathBuf>,
    pub eval: EvalSettings,
    pub compare: CompareSettings,
}

impl RunConfig {
    /// SHA-256 of the resolved config without the output directory, so a
    /// replay into a scratch directory hashes the same.
    /// Paths under `out` are hashed relative to it, so moving a run keeps its hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization is infallible");
        let out = serde_json::to_string(&self.out).expect("path serialization is infallible");
        let stem = out.trim_end_matches('"');
        let json = json.replace(&out, "\"$OUT\"").replace(&format!("{stem}/"), "\"$OUT/");
        hex_digest(json.as_bytes())
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.out.join(sub)
    }
}

/// Reads one table and remembers which keys were looked at.
struct Reader<'a> {
    prefix: String,
    table: &'a Table,
    seen: BTreeSet<String>,
}

impl<'a> Reader<'a> {
    fn new(prefix: &str, table: &'a Table) -> Self {
        Self { prefix: prefix.to_string(), table, seen: BTreeSet::new() }
    }

    fn name(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn get(&mut self, key: &str) -> Option<&'a Value> {
        self.seen.insert(key.to_string());
        self.table.get(key)
    }

    fn type_err(&self, key: &str, expected: &'static str) -> CliError {
        CliError::TypeError { key: self.name(key), expected }
    }

    fn section(&mut self, key: &str) -> Result<Reader<'a>, CliError> {
        let name = self.name(key);
        match self.get(key) {
            None => Ok(Reader::new(&name, &EMPTY)),
            Some(Value::Table(t)) => Ok(Reader::new(&name, t)),
            Some(_) => Err(self.type_err(key, "table")),
        }
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(x)) => Ok(Some(*x)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(self.type_err(key, "number")),
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    fn opt_u64(&mut self, key: &str) -> Result<Option<u64>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(_) => Err(self.type_err(key, "non-negative integer")),
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        Ok(self.opt_u64(key)?.unwrap_or(default))
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.opt_u64(key)?.map_or(default, |v| v as usize))
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(self.type_err(key, "boolean")),
        }
    }

    fn opt_str(&mut self, key: &str) -> Result<Option<String>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(self.type_err(key, "string")),
        }
    }

    fn str_list(&mut self, key: &str, default: &[&str]) -> Result<Vec<String>, CliError> {
        match self.get(key) {
            None => Ok(default.iter().map(|s| s.to_string()).collect()),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_str().map(String::from).ok_or_else(|| self.type_err(key, "array of strings")))
                .collect(),
            Some(_) => Err(self.type_err(key, "array of strings")),
        }
    }

    fn u64_list(&mut self, key: &str, default: &[u64]) -> Result<Vec<u64>, CliError> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                    _ => Err(self.type_err(key, "array of non-negative integers")),
                })
                .collect(),
            Some(_) => Err(self.type_err(key, "array of non-negative integers")),
        }
    }

    /// A snake_case string naming a variant of `T`.
    fn choice<T: DeserializeOwned>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::String(s)) => serde_json::from_value(serde_json::Value::String(s.clone()))
                .map_err(|_| CliError::InvalidValue { key: self.name(key), message: format!("unknown value {s:?}") }),
            Some(_) => Err(self.type_err(key, "string")),
        }
    }

    fn path(&mut self, key: &str, base: &Path) -> Result<Option<PathBuf>, CliError> {
        Ok(self.opt_str(key)?.map(|s| absolute(base, Path::new(&s))))
    }

    fn finish(self) -> Result<(), CliError> {
        match self.table.keys().find(|k| !self.seen.contains(*k)) {
            Some(k) => Err(CliError::UnknownKey(self.name(k))),
            None => Ok(()),
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses `section.key=value`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::InvalidValue { key: s.to_string(), message: "expected key=value".into() })?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::InvalidValue { key: key.to_string(), message: "empty key segment".into() });
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or(Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

pub fn apply_override(root: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("override paths are non-empty");
    let mut t = root;
    for (i, p) in parents.iter().enumerate() {
        let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(inner) => inner,
            _ => return Err(CliError::TypeError { key: path[..=i].join("."), expected: "table" }),
        };
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// Parses config text, applies overrides and resolves relative paths
/// against `base`.
pub fn parse_config(text: &str, overrides: &[String], base: &Path) -> Result<RunConfig, CliError> {
    let mut root: Table = toml::from_str(text).map_err(|e| CliError::ConfigParse(e.to_string()))?;
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut root, &path, value)?;
    }
    resolve(&root, base)
}

fn resolve(root: &Table, base: &Path) -> Result<RunConfig, CliError> {
    let mut r = Reader::new("", root);
    let seed = r.opt_u64("seed")?.ok_or_else(|| CliError::MissingRequired { key: "seed".into(), path: None })?;
    let out = absolute(base, Path::new(&r.opt_str("out")?.unwrap_or_else(|| "run".into())));

    let mut data = r.section("data")?;
    let records = data.path("records", base)?.unwrap_or_else(|| out.join("data/records.jsonl"));
    let vocab = data.path("vocab", base)?.unwrap_or_else(|| out.join("data/vocab.json"));
    data.finish()?;

    let synth = synth_section(&mut r, base, seed)?;
    let policy = policy_section(&mut r)?;
    let warmup = warmup_section(&mut r, seed)?;
    let (sft, sft_init) = sft_section(&mut r, base, seed)?;
    let (rlt, rlt_init) = rlt_section(&mut r, base, seed)?;

    let mut e = r.section("eval")?;
    let eval = EvalSettings {
        checkpoint: e.path("checkpoint", base)?.unwrap_or_else(|| out.join("rlt/final.ckpt")),
        splits: {
            let names = e.str_list("splits", &["iid_test", "ood_test"])?;
            names
                .iter()
                .map(|n| {
                    n.parse::<Split>()
                        .map_err(|_| CliError::InvalidValue { key: "eval.splits".into(), message: format!("unknown split {n:?}") })
                })
                .collect::<Result<_, _>>()?
        },
        strategy: e.choice("strategy", Strategy::Cot)?,
        decoding: match e.opt_str("decoding")?.as_deref() {
            None | Some("greedy") => Decoding::Greedy,
            Some("sampled") => Decoding::Sampled { seed },
            Some(other) => {
                return Err(CliError::InvalidValue { key: "eval.decoding".into(), message: format!("unknown value {other:?}") })
            }
        },
        bucket_width: e.usize("bucket_width", DEFAULT_BUCKET_WIDTH)?,
    };
    if eval.bucket_width == 0 {
        return Err(CliError::InvalidValue { key: "eval.bucket_width".into(), message: "must be >= 1".into() });
    }
    e.finish()?;

    let mut c = r.section("compare")?;
    let compare = CompareSettings {
        base: c.path("base", base)?.unwrap_or_else(|| out.join("rlt/base.ckpt")),
        sft: c.path("sft", base)?.unwrap_or_else(|| out.join("sft/final.ckpt")),
        rlt: c.path("rlt", base)?.unwrap_or_else(|| out.join("rlt/final.ckpt")),
        strategy: c.choice("strategy", Strategy::Cot)?,
    };
    c.finish()?;
    r.finish()?;

    Ok(RunConfig { seed, out, records, vocab, synth, policy, warmup, sft, sft_init, rlt, rlt_init, eval, compare })
}

fn synth_section(r: &mut Reader<'_>, base: &Path, seed: u64) -> Result<SynthSettings, CliError> {
    let mut s = r.section("synth")?;
    let d = SynthSpec::default();
    let answer_set: Vec<&str> = d.answer_set.iter().map(String::as_str).collect();
    let spec = SynthSpec {
        n_families: s.usize("n_families", d.n_families)?,
        findings_per_slot: s.usize("findings_per_slot", d.findings_per_slot)?,
        n_choices: s.usize("n_choices", d.n_choices)?,
        noise_pool: s.usize("noise_pool", d.noise_pool)?,
        noise_per_prompt: s.usize("noise_per_prompt", d.noise_per_prompt)?,
        answer_set: s.str_list("answer_set", &answer_set)?,
        p_train: s.f64("p_train", d.p_train)?,
        p_ood: s.f64("p_ood", d.p_ood)?,
        n_train: s.usize("n_train", d.n_train)?,
        n_iid_test: s.usize("n_iid_test", d.n_iid_test)?,
        n_ood_test: s.usize("n_ood_test", d.n_ood_test)?,
        seed,
    };
    spec.validate().map_err(|m| CliError::InvalidValue { key: "synth".into(), message: m })?;
    let source = s.choice("source", Source::Synthetic)?;
    let cot = s.bool("cot", true)?;
    let blacklist = s.bool("blacklist", true)?;
    let test_records = s.path("test_records", base)?;

    let mut g = s.section("generator")?;
    let generator = GeneratorSettings {
        mock: g.choice("mock", MockKind::Rate)?,
        malformation_rate: g.f64("malformation_rate", 0.2)?,
        malformation: g.choice("malformation", Malformation::MissingAnswer)?,
        target_n: g.usize("target_n", 1000)?,
        max_attempts: g.usize("max_attempts", 10_000)?,
        in_flight: g.usize("in_flight", 8)?,
        modalities: g.str_list("modalities", &["ct", "mri", "xray", "ultrasound"])?,
        knowledge: g.str_list("knowledge", &["anatomy", "pathology", "diagnosis"])?,
        url: g.opt_str("url")?,
        timeout_ms: g.u64("timeout_ms", 30_000)?,
        retries: g.usize("retries", 2)?,
        fixtures: g.path("fixtures", base)?,
    };
    if !(0.0..=1.0).contains(&generator.malformation_rate) {
        return Err(CliError::InvalidValue {
            key: "synth.generator.malformation_rate".into(),
            message: "must be in [0, 1]".into(),
        });
    }
    if generator.modalities.is_empty() || generator.knowledge.is_empty() {
        return Err(CliError::InvalidValue {
            key: "synth.generator".into(),
            message: "modalities and knowledge must be non-empty".into(),
        });
    }
    g.finish()?;
    s.finish()?;
    Ok(SynthSettings { source, spec, cot, blacklist, test_records, generator })
}

fn policy_section(r: &mut Reader<'_>) -> Result<PolicySettings, CliError> {
    let mut p = r.section("policy")?;
    let d = PolicyConfig::new(0);
    let out = PolicySettings {
        embed_dim: p.usize("embed_dim", d.embed_dim)?,
        hidden_dim: p.usize("hidden_dim", d.hidden_dim)?,
        context_window: p.usize("context_window", d.context_window)?,
        max_gen_len: p.usize("max_gen_len", d.max_gen_len)?,
        init_scale: p.f64("init_scale", d.init_scale)?,
    };
    p.finish()?;
    Ok(out)
}

fn warmup_section(r: &mut Reader<'_>, seed: u64) -> Result<WarmupConfig, CliError> {
    let mut w = r.section("warmup")?;
    let d = WarmupConfig::default();
    let out = WarmupConfig {
        epochs: w.usize("epochs", d.epochs)?,
        lr: w.f64("lr", d.lr)?,
        batch_size: w.usize("batch_size", d.batch_size)?,
        seed,
    };
    w.finish()?;
    Ok(out)
}

fn adam_keys(s: &mut Reader<'_>, d: &rltune::policy::AdamHyper) -> Result<rltune::policy::AdamHyper, CliError> {
    Ok(rltune::policy::AdamHyper {
        beta1: s.f64("adam_beta1", d.beta1)?,
        beta2: s.f64("adam_beta2", d.beta2)?,
        eps: s.f64("adam_eps", d.eps)?,
        weight_decay: s.f64("weight_decay", d.weight_decay)?,
    })
}

fn sft_section(r: &mut Reader<'_>, base: &Path, seed: u64) -> Result<(SftConfig, Option<PathBuf>), CliError> {
    let mut s = r.section("sft")?;
    let preset = s.opt_str("preset")?.unwrap_or_else(|| "text".into());
    let d = SftConfig::preset(&preset)
        .ok_or_else(|| CliError::InvalidValue { key: "sft.preset".into(), message: format!("unknown preset {preset:?}") })?;
    let cfg = SftConfig {
        lr: s.f64("lr", d.lr)?,
        batch_size: s.usize("batch_size", d.batch_size)?,
        epochs: s.usize("epochs", d.epochs)?,
        optimizer: s.choice("optimizer", d.optimizer)?,
        adam: adam_keys(&mut s, &d.adam)?,
        schedule: s.choice::<LrSchedule>("schedule", d.schedule)?,
        max_steps: s.opt_u64("max_steps")?,
        seed,
    };
    let init = s.path("init", base)?;
    s.finish()?;
    cfg.validate().map_err(|e| CliError::InvalidValue { key: "sft".into(), message: e.to_string() })?;
    Ok((cfg, init))
}

fn rlt_section(r: &mut Reader<'_>, base: &Path, seed: u64) -> Result<(RltConfig, Option<PathBuf>), CliError> {
    let mut s = r.section("rlt")?;
    let d = RltConfig::default();
    let mut rw = s.section("reward")?;
    let reward = rltune::reward::RewardConfig {
        ngram_n: rw.usize("ngram_n", d.reward.ngram_n)?,
        rep_weight: rw.f64("rep_weight", d.reward.rep_weight)?,
    };
    rw.finish()?;
    let cfg = RltConfig {
        group_size: s.usize("group_size", d.group_size)?,
        epsilon: s.f64("epsilon", d.epsilon)?,
        beta: s.f64("beta", d.beta)?,
        lr: s.f64("lr", d.lr)?,
        epochs: s.usize("epochs", d.epochs)?,
        batch_size: s.usize("batch_size", d.batch_size)?,
        max_steps: s.opt_u64("max_steps")?,
        clip_mode: s.choice("clip_mode", d.clip_mode)?,
        advantage_mode: s.choice("advantage_mode", d.advantage_mode)?,
        kl_estimator: s.choice("kl_estimator", d.kl_estimator)?,
        optimizer: s.choice::<OptimizerMode>("optimizer", d.optimizer)?,
        adam: adam_keys(&mut s, &d.adam)?,
        schedule: s.choice("schedule", d.schedule)?,
        reward,
        checkpoint_steps: s.u64_list("checkpoint_steps", &d.checkpoint_steps)?,
        seed,
        record_wall_time: s.bool("record_wall_time", d.record_wall_time)?,
    };
    let init = s.path("init", base)?;
    s.finish()?;
    cfg.validate().map_err(|e| CliError::InvalidValue { key: "rlt".into(), message: e.to_string() })?;
    Ok((cfg, init))
}
