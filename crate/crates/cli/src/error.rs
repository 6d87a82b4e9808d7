use std::path::PathBuf;

use rltune::dataforge::curate::CurateError;
use rltune::dataforge::generator::GeneratorError;
use rltune::eval::EvalError;
use rltune::policy::PolicyError;
use rltune::records::RecordError;
use rltune::tuner::TunerError;
use rltune::vocab::VocabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("missing required {key:?}{}", path.as_ref().map(|p| format!(": {} does not exist", p.display())).unwrap_or_default())]
    MissingRequired { key: String, path: Option<PathBuf> },
    #[error("config key {key:?} must be a {expected}")]
    TypeError { key: String, expected: &'static str },
    #[error("invalid value for {key:?}: {message}")]
    InvalidValue { key: String, message: String },
    #[error("config does not parse: {0}")]
    ConfigParse(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad run manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("replay found {0} differing outputs")]
    ReplayMismatch(usize),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Curate(#[from] CurateError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

impl CliError {
    /// 2 for configuration and input problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownKey(_)
            | CliError::MissingRequired { .. }
            | CliError::TypeError { .. }
            | CliError::InvalidValue { .. }
            | CliError::ConfigParse(_)
            | CliError::BadManifest { .. }
            | CliError::Records(_)
            | CliError::Vocab(_) => 2,
            _ => 1,
        }
    }

    /// Short variant name printed ahead of the message.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::UnknownKey(_) => "UnknownKey",
            CliError::MissingRequired { .. } => "MissingRequired",
            CliError::TypeError { .. } => "TypeError",
            CliError::InvalidValue { .. } => "InvalidValue",
            CliError::ConfigParse(_) => "ConfigParse",
            CliError::Locked(_) => "Locked",
            CliError::Io { .. } => "IoError",
            CliError::BadManifest { .. } => "BadManifest",
            CliError::ReplayMismatch(_) => "ReplayMismatch",
            CliError::Records(_) => "RecordError",
            CliError::Vocab(_) => "VocabError",
            CliError::Policy(_) => "PolicyError",
            CliError::Tuner(_) => "TunerError",
            CliError::Eval(_) => "EvalError",
            CliError::Curate(CurateError::Exhausted { .. }) => "Exhausted",
            CliError::Curate(_) => "CurateError",
            CliError::Generator(_) => "GeneratorError",
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}
