//! Run manifests.
//!
//! Every command writes `<command>.manifest.json` next to its outputs. It
//! records the command, crate version, seed, a SHA-256 of the effective
//! configuration and of every input and output file. Outputs are keyed by
//! their path relative to the output directory, inputs by parent directory
//! and file name, and nothing time-dependent is included, so identical runs
//! produce identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn input_name(path: &Path) -> String {
    let parent = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    let name = path.file_name().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    match parent {
        Some(p) => format!("{p}/{name}"),
        None => name,
    }
}

pub struct ManifestBuilder {
    manifest: Manifest,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config_text: &str) -> Self {
        let mut artifacts = BTreeMap::new();
        artifacts.insert("dacs-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        artifacts.insert("checkpoint-format".to_string(), "1".to_string());
        artifacts.insert("dataset-format".to_string(), "1".to_string());
        Self {
            manifest: Manifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config_sha256: sha256_hex(config_text.as_bytes()),
                artifacts,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let hash = hash_file(path)?;
        self.manifest.inputs.insert(input_name(path), hash);
        Ok(())
    }

    /// Records an output file, or every file below an output directory.
    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        if path.is_dir() {
            collect(path, &mut self.outputs).map_err(|e| CliError::Runtime(format!("cannot list {}: {e}", path.display())))
        } else {
            self.outputs.push(path.to_path_buf());
            Ok(())
        }
    }

    /// Hashes the recorded outputs and writes the manifest into `out`.
    pub fn write(mut self, out: &Path) -> CliResult<Manifest> {
        for path in std::mem::take(&mut self.outputs) {
            let rel = path.strip_prefix(out).unwrap_or(&path);
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            self.manifest.outputs.insert(key, hash_file(&path)?);
        }
        let path = out.join(manifest_name(&self.manifest.command));
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}
