use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{json, Value};

use crate::io::{sha256_hex, write_atomic};

/// One JSON file per request, named by the SHA-256 of the canonical key.
///
/// Files hold `{"key": ..., "value": ...}`; a hash collision or a foreign
/// file is treated as a miss.
pub struct DiskCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl DiskCache {
    pub fn new(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(DiskCache {
            dir: dir.as_ref().to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// serde_json maps are ordered, so `to_string` is already canonical.
    pub fn hash(key: &Value) -> String {
        sha256_hex(serde_json::to_string(key).expect("json value serializes").as_bytes())
    }

    fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(&hash[..2]).join(format!("{hash}.json"))
    }

    pub fn get(&self, key: &Value) -> std::io::Result<Option<Value>> {
        let path = self.path(&Self::hash(key));
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let entry: Value = match serde_json::from_slice(&bytes) {
            Ok(v) => v,
            Err(_) => return Ok(None),
        };
        if entry.get("key") != Some(key) {
            return Ok(None);
        }
        Ok(entry.get("value").cloned())
    }

    pub fn put(&self, key: &Value, value: &Value) -> std::io::Result<()> {
        let path = self.path(&Self::hash(key));
        let body = serde_json::to_vec(&json!({"key": key, "value": value})).expect("json value serializes");
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        write_atomic(&path, &body)
    }

    pub fn len(&self) -> usize {
        walk(&self.dir)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk(dir: &Path) -> usize {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return 0;
    };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk(&p)
            } else {
                usize::from(p.extension().is_some_and(|x| x == "json"))
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_key_check() {
        let dir = tempfile::tempdir().unwrap();
        let c = DiskCache::new(dir.path()).unwrap();
        let k = json!({"op": "chat", "x": 1});
        assert_eq!(c.get(&k).unwrap(), None);
        c.put(&k, &json!("hello")).unwrap();
        assert_eq!(c.get(&k).unwrap(), Some(json!("hello")));
        assert_eq!(c.len(), 1);
        // Overwrite a file with a different key: treated as a miss.
        let path = c.path(&DiskCache::hash(&k));
        std::fs::write(&path, br#"{"key": {"other": true}, "value": 1}"#).unwrap();
        assert_eq!(c.get(&k).unwrap(), None);
    }
}
