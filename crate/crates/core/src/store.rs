//! Durable artifacts: JSONL appends with crash recovery, run manifests with
//! atomic replacement, and resume logic.
//!
//! Every JSONL line is stamped with `schema_version` at write time; document
//! files (manifest, fit, report) carry the field natively. Timestamps live
//! only in manifests so every other artifact is byte-reproducible.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{DeliberationConfig, Transcript};

pub const SCHEMA_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over a byte string; `seeded` chains across segments.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_seeded(bytes, FNV_OFFSET)
}

pub fn fnv1a64_seeded(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = seed;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o failure on {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("serialization failure: {0}")]
    Serde(String),
    #[error("refusing to persist invalid transcript: {0}")]
    InvalidTranscript(String),
    #[error("corrupt record at {path} line {line}: {detail}")]
    Corrupt {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("manifest inconsistency: {0}")]
    Manifest(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

/// Serialize a record as one JSON line with `schema_version` stamped in.
fn versioned_line<T: Serialize>(record: &T) -> Result<String, StoreError> {
    let mut value = serde_json::to_value(record).map_err(|e| StoreError::Serde(e.to_string()))?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert(
            "schema_version".to_string(),
            serde_json::Value::from(SCHEMA_VERSION),
        );
    }
    serde_json::to_string(&value).map_err(|e| StoreError::Serde(e.to_string()))
}

/// Append one record as a single line. The line is written in one call on an
/// append-mode handle, so a crash can only truncate the final line, never
/// damage earlier ones.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<(), StoreError> {
    let mut line = versioned_line(record)?;
    line.push('\n');
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    file.write_all(line.as_bytes()).map_err(|e| io_err(path, e))
}

/// Validate then append a transcript.
pub fn append_transcript(path: &Path, t: &Transcript) -> Result<(), StoreError> {
    t.validate()
        .map_err(|e| StoreError::InvalidTranscript(e.to_string()))?;
    append_jsonl(path, t)
}

#[derive(Debug)]
pub struct JsonlLoad<T> {
    pub records: Vec<T>,
    /// Partial trailing lines dropped during recovery (0 or 1).
    pub truncated: usize,
}

/// Load a JSONL file, recovering from a torn final line: a trailing line
/// that fails to parse is reported as truncated, while a malformed interior
/// line is corruption and errors out.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<JsonlLoad<T>, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    let mut truncated = 0;
    let mut offset = 0;
    let mut line_no = 0;
    while offset < text.len() {
        line_no += 1;
        let rest = &text[offset..];
        let (line, complete, consumed) = match rest.find('\n') {
            Some(idx) => (&rest[..idx], true, idx + 1),
            None => (rest, false, rest.len()),
        };
        offset += consumed;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(line) {
            Ok(record) => records.push(record),
            Err(_) if !complete => {
                truncated += 1;
                break;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: line_no,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok(JsonlLoad { records, truncated })
}

pub fn load_transcripts(path: &Path) -> Result<JsonlLoad<Transcript>, StoreError> {
    load_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum DilemmaStatus {
    Pending,
    Done,
    Aborted { reason: String },
}

/// Config snapshot identifying a run. Holds no secrets: remote agents are
/// recorded by name and the prompt set by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub agents: Vec<String>,
    pub deliberation: DeliberationConfig,
    pub seed: u64,
    pub prompts_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub config: ManifestConfig,
    pub status: BTreeMap<String, DilemmaStatus>,
    pub created_at: i64,
    pub updated_at: i64,
}

/// Run ids are a stable hash of the config snapshot, so rerunning the same
/// configuration lands in the same directory.
pub fn derive_run_id(config: &ManifestConfig) -> Result<String, StoreError> {
    let bytes = serde_json::to_vec(config).map_err(|e| StoreError::Serde(e.to_string()))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

impl RunManifest {
    pub fn new(
        config: ManifestConfig,
        dilemma_ids: impl IntoIterator<Item = String>,
        now: i64,
    ) -> Result<RunManifest, StoreError> {
        let run_id = derive_run_id(&config)?;
        Ok(RunManifest {
            schema_version: SCHEMA_VERSION,
            run_id,
            config,
            status: dilemma_ids
                .into_iter()
                .map(|id| (id, DilemmaStatus::Pending))
                .collect(),
            created_at: now,
            updated_at: now,
        })
    }

    pub fn mark_done(&mut self, dilemma_id: &str, now: i64) -> Result<(), StoreError> {
        self.set_status(dilemma_id, DilemmaStatus::Done, now)
    }

    pub fn mark_aborted(
        &mut self,
        dilemma_id: &str,
        reason: String,
        now: i64,
    ) -> Result<(), StoreError> {
        self.set_status(dilemma_id, DilemmaStatus::Aborted { reason }, now)
    }

    fn set_status(
        &mut self,
        dilemma_id: &str,
        status: DilemmaStatus,
        now: i64,
    ) -> Result<(), StoreError> {
        match self.status.get_mut(dilemma_id) {
            Some(slot) => {
                *slot = status;
                self.updated_at = now;
                Ok(())
            }
            None => Err(StoreError::Manifest(format!(
                "dilemma {dilemma_id:?} is not part of this run"
            ))),
        }
    }
}

/// Dilemmas still needing work: everything without a done status. The
/// manifest must cover exactly the corpus ids.
pub fn resume(manifest: &RunManifest, corpus_ids: &[String]) -> Result<Vec<String>, StoreError> {
    let manifest_ids: Vec<&String> = manifest.status.keys().collect();
    let mut sorted_corpus: Vec<&String> = corpus_ids.iter().collect();
    sorted_corpus.sort();
    sorted_corpus.dedup();
    if manifest_ids != sorted_corpus {
        return Err(StoreError::Manifest(format!(
            "manifest covers {} ids, corpus has {}; sets differ",
            manifest_ids.len(),
            sorted_corpus.len()
        )));
    }
    Ok(manifest
        .status
        .iter()
        .filter(|(_, s)| !matches!(s, DilemmaStatus::Done))
        .map(|(id, _)| id.clone())
        .collect())
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(runs_root: &Path, run_id: &str) -> RunPaths {
        RunPaths {
            root: runs_root.join(run_id),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn transcripts(&self) -> PathBuf {
        self.root.join("transcripts.jsonl")
    }
    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }
    pub fn fit(&self) -> PathBuf {
        self.root.join("fit.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Write a JSON document atomically: temp file in the same directory, then
/// rename over the target.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| StoreError::Serde(e.to_string()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn save_manifest(paths: &RunPaths, manifest: &RunManifest) -> Result<(), StoreError> {
    std::fs::create_dir_all(&paths.root).map_err(|e| io_err(&paths.root, e))?;
    write_json_atomic(&paths.manifest(), manifest)
}

pub fn load_manifest(paths: &RunPaths) -> Result<RunManifest, StoreError> {
    let path = paths.manifest();
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Serde(e.to_string()))
}
