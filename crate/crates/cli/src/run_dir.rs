//! Output directories: an exclusive lock for the duration of a run and a
//! manifest that pins everything needed to reproduce it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rltune::policy::{hex_digest, CHECKPOINT_FORMAT_VERSION};
use rltune::tuner::METRICS_HEADER;

use crate::config::RunConfig;
use crate::error::{io_err, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// A locked output directory. The lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(io_err(path))?;
        let lock = path.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(io_err(&lock))?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(path.to_path_buf())),
            Err(e) => return Err(io_err(&lock)(e)),
        }
        Ok(Self { path: path.to_path_buf(), lock })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(io_err(&p))?;
        Ok(p)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formats {
    pub manifest: u32,
    pub checkpoint: u32,
    pub metrics_header: String,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            manifest: MANIFEST_FORMAT_VERSION,
            checkpoint: CHECKPOINT_FORMAT_VERSION,
            metrics_header: METRICS_HEADER.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub formats: Formats,
    pub config: RunConfig,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Output file name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex_digest(&bytes))
}

/// Hashes every regular file in `dir` other than the manifest and lock.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_FILE || name == LOCK_FILE || !entry.path().is_file() {
            continue;
        }
        out.insert(name, file_sha256(&entry.path())?);
    }
    Ok(out)
}

pub fn write_manifest(dir: &RunDir, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<RunManifest, CliError> {
    let mut hashed = BTreeMap::new();
    for p in inputs {
        hashed.insert(p.to_path_buf(), file_sha256(p)?);
    }
    let m = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        formats: Formats::default(),
        config: cfg.clone(),
        inputs: hashed,
        outputs: hash_outputs(&dir.path)?,
    };
    dir.write(MANIFEST_FILE, serde_json::to_string_pretty(&m).expect("manifest serialization is infallible"))?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|_| CliError::MissingRequired { key: "manifest".into(), path: Some(path.clone()) })?;
    serde_json::from_str(&text).map_err(|e| CliError::BadManifest { path, message: e.to_string() })
}
