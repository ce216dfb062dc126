//! Append-only run records with a manifest, torn-write recovery and resume.
//!
//! Layout of a run directory:
//! `records.jsonl` (one [`RunRecord`] per line) and `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::dialect::ParsedResponse;
use crate::eval::{ScoredStep, StepEvaluation};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_EVERY: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run store i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("record {line} of {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("run directory belongs to config {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub mode: String,
    pub round: u32,
    pub episode_id: String,
    pub step_index: usize,
    pub sample: u32,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/r{}/{}#{}/s{}", self.mode, self.round, self.episode_id, self.step_index, self.sample)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: RecordKey,
    pub seed: u64,
    pub episode_len: usize,
    pub truncated: bool,
    pub gt_action: Action,
    pub raw_response: String,
    pub parsed: ParsedResponse,
    pub prediction: Option<Action>,
    pub evaluation: StepEvaluation,
    /// Per history position: rendered from an on-policy artifact.
    #[serde(default)]
    pub history_mask: Vec<bool>,
    /// Per history position: an artifact was available for substitution.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eligible_mask: Vec<bool>,
    /// Set when this step produced a reusable on-policy artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
}

impl RunRecord {
    pub fn scored(&self) -> ScoredStep {
        ScoredStep {
            episode_id: self.key.episode_id.clone(),
            step_index: self.key.step_index,
            episode_len: self.episode_len,
            truncated: self.truncated,
            gt_kind: self.gt_action.kind(),
            evaluation: self.evaluation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed_list: Vec<u64>,
    pub completed: BTreeSet<String>,
    #[serde(default)]
    pub finalized: bool,
}

pub struct RunStore {
    dir: PathBuf,
    manifest: Manifest,
    records: BTreeMap<RecordKey, RunRecord>,
    file: File,
    since_manifest: usize,
    warnings: Vec<String>,
}

/// Write `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

impl RunStore {
    /// Open or create a run directory. Existing records are loaded; a torn
    /// trailing line is cut off with a warning.
    pub fn open(dir: &Path, config_hash: &str, seed_list: &[u64]) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            let old: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                path: manifest_path.clone(),
                line: 1,
                reason: e.to_string(),
            })?;
            if old.config_hash != config_hash {
                return Err(StoreError::ConfigMismatch { expected: config_hash.to_string(), found: old.config_hash });
            }
        }
        let records_path = dir.join(RECORDS_FILE);
        let mut warnings = Vec::new();
        let records = load_records(&records_path, &mut warnings)?;
        let file = OpenOptions::new().create(true).append(true).open(&records_path).map_err(io_err(&records_path))?;
        let manifest = Manifest {
            config_hash: config_hash.to_string(),
            seed_list: seed_list.to_vec(),
            completed: records.keys().map(|k| k.to_string()).collect(),
            finalized: false,
        };
        let mut store = RunStore { dir: dir.to_path_buf(), manifest, records, file, since_manifest: 0, warnings };
        store.write_manifest()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.records.contains_key(key)
    }

    pub fn get(&self, key: &RecordKey) -> Option<&RunRecord> {
        self.records.get(key)
    }

    /// Records in key order.
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.values()
    }

    /// Durably append a record. Re-appending an existing key is a no-op
    /// and returns false.
    pub fn append(&mut self, rec: RunRecord) -> Result<bool, StoreError> {
        if let Some(old) = self.records.get(&rec.key) {
            if old != &rec {
                warn!("record {} already stored with different content; keeping the first", rec.key);
            }
            return Ok(false);
        }
        let path = self.dir.join(RECORDS_FILE);
        let mut line = serde_json::to_string(&rec).expect("records serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.file.flush().map_err(io_err(&path))?;
        self.manifest.completed.insert(rec.key.to_string());
        self.records.insert(rec.key.clone(), rec);
        self.since_manifest += 1;
        if self.since_manifest >= MANIFEST_EVERY {
            self.write_manifest()?;
        }
        Ok(true)
    }

    pub fn write_manifest(&mut self) -> Result<(), StoreError> {
        let path = self.dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
        self.since_manifest = 0;
        Ok(())
    }

    /// Rewrite records in key order so that equal runs give equal bytes.
    pub fn finalize(&mut self) -> Result<(), StoreError> {
        let path = self.dir.join(RECORDS_FILE);
        let mut buf = String::new();
        for rec in self.records.values() {
            buf.push_str(&serde_json::to_string(rec).expect("records serialize"));
            buf.push('\n');
        }
        write_atomic(&path, buf.as_bytes()).map_err(io_err(&path))?;
        self.file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        self.manifest.finalized = true;
        self.write_manifest()
    }
}

impl Drop for RunStore {
    fn drop(&mut self) {
        if self.since_manifest > 0 {
            if let Err(e) = self.write_manifest() {
                warn!("manifest not written on close: {e}");
            }
        }
    }
}

/// Reads the committed records of a finished or partial run directory
/// without checking its config hash. Torn trailing lines are dropped.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>, StoreError> {
    let mut warnings = Vec::new();
    Ok(load_records(&dir.join(RECORDS_FILE), &mut warnings)?.into_values().collect())
}

fn load_records(path: &Path, warnings: &mut Vec<String>) -> Result<BTreeMap<RecordKey, RunRecord>, StoreError> {
    let mut out = BTreeMap::new();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(StoreError::Io { path: path.to_path_buf(), source: e }),
    };
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..].iter().position(|b| *b == b'\n').map(|i| offset + i);
        let line = &bytes[offset..end.unwrap_or(bytes.len())];
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<RunRecord>(s).map_err(|e| e.to_string()));
        match parsed {
            Ok(rec) => {
                out.entry(rec.key.clone()).or_insert(rec);
            }
            Err(reason) => {
                let is_last = end.map_or(true, |e| e + 1 >= bytes.len());
                if !is_last {
                    return Err(StoreError::Corrupt { path: path.to_path_buf(), line: line_no, reason });
                }
                let msg = format!("{}: torn trailing record at line {line_no} truncated ({reason})", path.display());
                warn!("{msg}");
                warnings.push(msg);
                let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
                f.set_len(offset as u64).map_err(io_err(path))?;
                f.sync_all().map_err(io_err(path))?;
                break;
            }
        }
        offset = end.map_or(bytes.len(), |e| e + 1);
    }
    Ok(out)
}
