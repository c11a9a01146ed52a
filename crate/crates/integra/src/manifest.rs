//! Run manifests: what a command read, what it wrote, and content hashes that
//! let the next command in a chain detect edited inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::error::CliError;
use crate::io;

pub const DIR_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub timestamp: String,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<FileHash>,
    pub options: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `SOURCE_DATE_EPOCH` when set, so reruns can be byte-identical; the clock
/// otherwise. Only ever recorded, never used in computation.
pub fn timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<i64>().ok());
    let at = match secs.and_then(|s| OffsetDateTime::from_unix_timestamp(s).ok()) {
        Some(t) => t,
        None => OffsetDateTime::now_utc(),
    };
    at.format(&Rfc3339).unwrap_or_default()
}

/// Manifest path for a single output file: `fit.json` -> `fit.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

pub fn is_manifest(path: &Path) -> bool {
    path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n == DIR_MANIFEST || n.ends_with(".manifest.json"))
}

pub struct ManifestBuilder {
    command: String,
    inputs: Vec<FileHash>,
    options: serde_json::Value,
}

impl ManifestBuilder {
    pub fn new(command: &str, options: serde_json::Value) -> Self {
        Self { command: command.to_string(), inputs: Vec::new(), options }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Hashes `outputs` (which must live under `manifest`'s directory) and
    /// writes the manifest.
    pub fn write(self, manifest: &Path, outputs: &[PathBuf]) -> Result<RunManifest, CliError> {
        let dir = manifest.parent().unwrap_or(Path::new(""));
        let mut hashes = Vec::new();
        for p in outputs {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            hashes.push(FileHash { path: rel.display().to_string(), sha256: sha256_file(p)? });
        }
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: timestamp(),
            inputs: self.inputs,
            outputs: hashes,
            options: self.options,
        };
        io::write_json(manifest, &m)?;
        Ok(m)
    }
}

/// Checks `path` against any manifest that lists it as an output: the
/// directory manifest and the file's own sidecar.
pub fn verify(path: &Path) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let name = match path.file_name().and_then(|n| n.to_str()) {
        Some(n) => n,
        None => return Ok(()),
    };
    for candidate in [dir.join(DIR_MANIFEST), sidecar(path)] {
        if candidate == path || !candidate.is_file() {
            continue;
        }
        let m: RunManifest = io::read_json(&candidate)?;
        if let Some(entry) = m.outputs.iter().find(|o| o.path == name) {
            let found = sha256_file(path)?;
            if found != entry.sha256 {
                return Err(CliError::Tamper {
                    file: path.to_path_buf(),
                    manifest: candidate,
                    expected: entry.sha256.clone(),
                    found,
                });
            }
        }
    }
    Ok(())
}
