//! Run manifests: what was run, with which seeds, and checksums of every
//! file it produced.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub seed: u64,
    pub wall_ms: u64,
    /// `None` on success.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: String,
    pub runs: Vec<RunRecord>,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").expect("write to string");
    }
    s
}

impl RunManifest {
    pub fn new(command: &str, config: String) -> Self {
        Self {
            command: command.to_string(),
            code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            config,
            runs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.error.is_some())
    }

    /// Records `name` (inside `dir`) with its current checksum.
    pub fn add_output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        self.outputs.push(OutputFile {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Manifest(e.to_string()))?;
        std::fs::write(&path, json + "\n").map_err(|e| HarnessError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Manifest(e.to_string()))
    }

    /// Checks that every listed output exists with the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for out in &self.outputs {
            let path = dir.join(&out.path);
            let bytes = std::fs::read(&path)
                .map_err(|e| HarnessError::Manifest(format!("{}: {e}", path.display())))?;
            let sum = sha256_hex(&bytes);
            if sum != out.sha256 {
                return Err(HarnessError::Manifest(format!(
                    "{}: checksum {sum} does not match recorded {}",
                    out.path, out.sha256
                )));
            }
        }
        Ok(())
    }
}
