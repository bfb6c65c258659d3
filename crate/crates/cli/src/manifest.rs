//! Run manifest: after a command writes its artifacts, `manifest.json`
//! records the effective config, timestamps, and a SHA-256 digest of every
//! file, so a run can be audited and replayed.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub artifact_version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub files: Vec<FileEntry>,
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock after 1970")
        .as_millis()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<FileEntry, Failure> {
    let path = dir.join(name);
    fs::write(&path, body)
        .map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(FileEntry {
        name: name.to_string(),
        bytes: body.len(),
        sha256: sha256_hex(body.as_bytes()),
    })
}

/// Write every artifact, then the manifest describing them. The manifest
/// is always last so its inventory only ever names files that exist.
pub fn write_run(
    dir: &Path,
    command: &'static str,
    config: serde_json::Value,
    started_unix_ms: u128,
    files: &[(String, String)],
) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    let mut entries = Vec::with_capacity(files.len());
    for (name, body) in files {
        entries.push(write_file(dir, name, body)?);
    }
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        started_unix_ms,
        finished_unix_ms: now_ms(),
        files: entries,
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), body)
        .map_err(|e| Failure::Io(format!("cannot write manifest.json: {e}")))?;
    Ok(())
}
