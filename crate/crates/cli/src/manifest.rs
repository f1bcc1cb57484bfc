use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub inputs: Vec<Entry>,
    pub outputs: Vec<Entry>,
}

fn hex_digest(h: Sha256) -> String {
    hex::encode(h.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex_digest(Sha256::new_with_prefix(bytes))
}

/// Digest of a file, or of a directory's relative paths and file digests
/// in sorted order.
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    if path.is_file() {
        return Ok(hash_bytes(&fs::read(path).map_err(|e| CliError::io(path, e))?));
    }
    let mut h = Sha256::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if !entry.file_type().is_file() || entry.file_name() == MANIFEST {
            continue;
        }
        let rel = entry.path().strip_prefix(path).expect("walk stays below root");
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(hash_path(entry.path())?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex_digest(h))
}

pub struct Recorder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("configs serialize"),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes everything recorded and writes `manifest.json` into `dir`.
    pub fn finish(self, dir: &Path) -> Result<Manifest, CliError> {
        let entries = |paths: &[PathBuf]| -> Result<Vec<Entry>, CliError> {
            paths
                .iter()
                .map(|p| {
                    Ok(Entry {
                        path: p.display().to_string(),
                        sha256: hash_path(p)?,
                    })
                })
                .collect()
        };
        let canonical = serde_json::to_vec(&self.config).expect("value serializes");
        let m = Manifest {
            tool: "prunekit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config_sha256: hash_bytes(&canonical),
            config: self.config,
            inputs: entries(&self.inputs)?,
            outputs: entries(&self.outputs)?,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(m)
    }
}
