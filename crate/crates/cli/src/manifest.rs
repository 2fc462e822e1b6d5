//! Reproducibility manifests written next to every command's artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHash {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    /// The resolved configuration, overrides applied.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<ArtifactHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(command: &str, config: Option<&ExperimentConfig>, seeds: &[(&str, u64)]) -> Self {
        let text = config.map(|c| c.to_toml()).unwrap_or_default();
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: sha256_hex(text.as_bytes()),
            config: text,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            artifacts: Vec::new(),
        }
    }

    /// Hashes `files` and writes the manifest into `dir`.
    pub fn write(mut self, dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
        for f in files {
            let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
            let rel = f.strip_prefix(dir).unwrap_or(f);
            self.artifacts.push(ArtifactHash {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FILE_NAME);
        let mut json = serde_json::to_string_pretty(&self)?;
        json.push('\n');
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
