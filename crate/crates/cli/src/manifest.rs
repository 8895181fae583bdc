//! Per-stage completion records with content hashes, and the run lock.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use fire_core::io::{read_json, sha256_file, write_json};

use crate::error::RunError;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params_hash: String,
    /// Input label to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the run directory) to content hash.
    pub outputs: BTreeMap<String, String>,
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").into(),
                ..RunManifest::default()
            });
        }
        read_json(&path).map_err(|e| RunError::Other(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), RunError> {
        Ok(write_json(&dir.join(MANIFEST_FILE), self)?)
    }
}

/// Hashes every file; a missing file hashes to `None`.
pub fn hash_files(dir: &Path, rel: &[String]) -> BTreeMap<String, Option<String>> {
    rel.iter().map(|r| (r.clone(), sha256_file(&dir.join(r)).ok())).collect()
}

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(RunError::Locked(_))));
        drop(first);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifest_round_trip_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), "x").unwrap();
        let h = hash_files(dir.path(), &["a.txt".into(), "b.txt".into()]);
        assert!(h["a.txt"].is_some());
        assert_eq!(h["b.txt"], None);
        let mut m = RunManifest::load_or_default(dir.path()).unwrap();
        m.stages.insert(
            "ingest".into(),
            StageRecord {
                params_hash: "p".into(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::from([("a.txt".into(), h["a.txt"].clone().unwrap())]),
                completed_at: 1,
            },
        );
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load_or_default(dir.path()).unwrap(), m);
    }
}
