use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Provenance record written once per command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the fully resolved configuration text.
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub corpus_checksum: Option<String>,
    pub checkpoint_path: Option<PathBuf>,
    /// SHA-256 of every file the command wrote.
    pub outputs: BTreeMap<String, String>,
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: None,
            config_sha256: None,
            seed,
            corpus_checksum: None,
            checkpoint_path: None,
            outputs: BTreeMap::new(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn record_output(&mut self, path: &Path) -> Result<(), CliError> {
        let sum = file_sha256(path)?;
        self.outputs.insert(path.display().to_string(), sum);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Writes to `path`, or prints one JSON line to stderr.
    pub fn emit(&self, path: Option<&Path>) -> Result<(), CliError> {
        match path {
            Some(p) => std::fs::write(p, self.to_json() + "\n").map_err(|e| CliError::io(p, e)),
            None => {
                eprintln!("manifest {}", serde_json::to_string(self).expect("manifest serializes"));
                Ok(())
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
