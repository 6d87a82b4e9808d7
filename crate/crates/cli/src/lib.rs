//! Command-line front end: config files, run directories and the
//! subcommands that wire data curation, training and evaluation together.

pub mod commands;
pub mod config;
pub mod error;
pub mod run_dir;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::Command;
pub use config::{parse_config, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rltune", version, about = "Group-relative RL tuning on a toy policy")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate or curate a dataset.
    Synth(RunArgs),
    /// Supervised fine-tuning on the train split's rationales.
    TrainSft(RunArgs),
    /// Group-relative RL on the train split.
    TrainRlt(RunArgs),
    /// Evaluate one checkpoint on the configured splits.
    Eval(RunArgs),
    /// Base, SFT and RL checkpoints on iid and ood splits.
    Compare(RunArgs),
    /// Re-execute a recorded run and diff its outputs.
    Replay {
        /// Directory holding the run's manifest.json.
        run_dir: PathBuf,
        /// Compare against this finished run instead of re-executing.
        #[arg(long)]
        against: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rlt.lr=3e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set rlt.beta=...`.
    #[arg(long)]
    beta: Option<f64>,
    /// Run root; each command writes its own subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `direct` or `cot`, for eval and compare.
    #[arg(long)]
    strategy: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(b) = self.beta {
            o.push(format!("rlt.beta={b:?}"));
        }
        if let Some(p) = &self.out {
            o.push(format!("out={}", toml_string(&p.to_string_lossy())));
        }
        if let Some(s) = &self.strategy {
            o.push(format!("eval.strategy={}", toml_string(s)));
            o.push(format!("compare.strategy={}", toml_string(s)));
        }
        o
    }

    fn load(&self) -> Result<RunConfig, CliError> {
        let cwd = std::env::current_dir().map_err(error::io_err(Path::new(".")))?;
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|_| CliError::MissingRequired { key: "config".into(), path: Some(p.clone()) })?,
            None => String::new(),
        };
        parse_config(&text, &self.overrides(), &cwd)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (cmd, args) = match cli.command {
        Cmd::Replay { run_dir, against } => {
            let diff = commands::cmd_replay(&run_dir, against.as_deref())?;
            return if diff.differing.is_empty() { Ok(()) } else { Err(CliError::ReplayMismatch(diff.differing.len())) };
        }
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::TrainSft(a) => (Command::TrainSft, a),
        Cmd::TrainRlt(a) => (Command::TrainRlt, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Compare(a) => (Command::Compare, a),
    };
    let cfg = args.load()?;
    let m = commands::execute(cmd, &cfg)?;
    eprintln!("{}: wrote {} ({} files, config {})", cmd.name(), cfg.dir(cmd.subdir()).display(), m.outputs.len(), &m.config_hash[..12]);
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            e.exit_code()
        }
    }
}
