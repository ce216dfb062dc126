use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache conflict for {0}: a different payload is already stored")]
    Conflict(String),
    #[error("cache file {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub step: String,
    pub config_hash: String,
    pub round: u32,
    pub sample: u32,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: CacheKey,
    value: String,
}

/// Thread-safe response cache, optionally backed by an append-only file.
#[derive(Default)]
pub struct ResponseCache {
    map: RwLock<HashMap<CacheKey, String>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl ResponseCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load entries from `path` (if present) and append new ones to it.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io_err = |source| CacheError::Io { path: path.to_path_buf(), source };
        let mut map = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) => {
                        map.insert(e.key, e.value);
                    }
                    Err(e) => warn!("{}:{}: skipping unreadable cache entry: {e}", path.display(), i + 1),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        Ok(ResponseCache { map: RwLock::new(map), file: Some((path.to_path_buf(), Mutex::new(file))) })
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        self.map.read().expect("cache lock").get(key).cloned()
    }

    /// Store a payload. Identical re-puts are no-ops; a different payload
    /// under the same key is a conflict.
    pub fn put(&self, key: CacheKey, value: String) -> Result<(), CacheError> {
        let mut map = self.map.write().expect("cache lock");
        if let Some(old) = map.get(&key) {
            return if *old == value { Ok(()) } else { Err(CacheError::Conflict(format!("{key:?}"))) };
        }
        if let Some((path, file)) = &self.file {
            let mut line = serde_json::to_string(&Entry { key: key.clone(), value: value.clone() }).expect("entry serializes");
            line.push('\n');
            let mut f = file.lock().expect("cache file lock");
            f.write_all(line.as_bytes()).map_err(|source| CacheError::Io { path: path.clone(), source })?;
        }
        map.insert(key, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn key(s: &str) -> CacheKey {
        CacheKey { step: s.into(), config_hash: "c".into(), round: 0, sample: 0 }
    }

    #[test]
    fn put_get_and_cold() {
        let c = ResponseCache::new();
        assert_eq!(c.get(&key("a")), None);
        c.put(key("a"), "x".into()).unwrap();
        assert_eq!(c.get(&key("a")).as_deref(), Some("x"));
        c.put(key("a"), "x".into()).unwrap();
        assert!(matches!(c.put(key("a"), "y".into()), Err(CacheError::Conflict(_))));
    }

    #[test]
    fn racing_identical_puts_store_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let c = Arc::new(ResponseCache::open(&path).unwrap());
        let handles: Vec<_> = (0..16)
            .map(|_| {
                let c = Arc::clone(&c);
                std::thread::spawn(move || {
                    for i in 0..50 {
                        c.put(key(&format!("k{i}")), format!("v{i}")).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(c.len(), 50);
        drop(c);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 50);
        let reopened = ResponseCache::open(&path).unwrap();
        assert_eq!(reopened.get(&key("k7")).as_deref(), Some("v7"));
    }
}
