use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use protodiv::Config;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation and the files it produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Effective config as TOML; parses back to the config the run used.
    pub config: String,
    pub config_hash: String,
    pub code_version: String,
    /// SHA-256 of the running executable.
    pub code_hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to `out_dir`, each with its SHA-256.
    pub artifacts: Vec<(String, String)>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn code_hash() -> String {
    std::env::current_exe()
        .ok()
        .and_then(|p| std::fs::read(p).ok())
        .map(|b| hex::encode(Sha256::digest(b)))
        .unwrap_or_default()
}

impl RunManifest {
    pub fn begin(command: &str, config: &Config, out_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config: config.to_toml_string(),
            config_hash: config.content_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            code_hash: code_hash(),
            seed: config.trainer.seed,
            out_dir: out_dir.to_path_buf(),
            started_unix: unix_now(),
            finished_unix: 0,
            artifacts: Vec::new(),
        }
    }

    /// Hash the listed artifacts, which must all exist, and write the manifest.
    pub fn finish(mut self, artifacts: &[&str]) -> CliResult<Self> {
        self.artifacts.clear();
        for a in artifacts {
            let p = self.out_dir.join(a);
            if !p.is_file() {
                return Err(CliError::Runtime(format!(
                    "expected artifact {} is missing",
                    p.display()
                )));
            }
            self.artifacts.push((a.to_string(), sha256_file(&p)?));
        }
        self.finished_unix = unix_now();
        std::fs::write(self.out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }
}
