//! Run manifests: the resolved configuration, seed, input checksums, and
//! software version of one command invocation, sufficient to re-run it.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct InputChecksum {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<InputChecksum>,
    pub config: serde_json::Value,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    started: chrono::DateTime<chrono::Utc>,
    inputs: Vec<InputChecksum>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            started: chrono::Utc::now(),
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs.push(InputChecksum {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(self)
    }

    /// Writes `manifest.json` into the output directory.
    pub fn write(self, out_dir: &Path, config: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            started: self.started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
            inputs: self.inputs,
            config,
        };
        write_json(&out_dir.join("manifest.json"), &manifest)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for checksum", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
