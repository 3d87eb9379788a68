//! Append-only run ledger.
//!
//! A ledger directory holds `manifest.json` (run configuration) and
//! `events.jsonl`, one [`LedgerEntry`] per line. Wall-clock time lives only in
//! `ts_ms`, which [`ledger_digest`] leaves out, so identical runs digest equally.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::evaluator::EvaluationResult;
use crate::estimator::GateViolation;
use crate::llm::{ChatTranscript, Explanation};
use crate::pareto::{CandidateRecord, FrontSnapshot, ParetoFront};
use crate::space::ArchitectureDocument;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt ledger at {path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("ledger {0} already contains events")]
    NotEmpty(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum GateOutcome {
    Accept,
    Reject { violations: Vec<GateViolation> },
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    PromptSent {
        transcript: ChatTranscript,
    },
    CompletionReceived {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        content: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    CandidateParsed {
        candidate_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arch_hash: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arch: Option<ArchitectureDocument>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    GateVerdict {
        candidate_id: String,
        arch_hash: String,
        #[serde(flatten)]
        outcome: GateOutcome,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        macs: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        peak_sram_bytes: Option<u64>,
    },
    EvaluationResult {
        result: EvaluationResult,
        /// Present when the evaluation succeeded; this is what replay consumes.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        record: Option<CandidateRecord>,
    },
    FrontSnapshot {
        snapshot: FrontSnapshot,
    },
    ExplanationRecorded {
        explanation: Explanation,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::PromptSent { .. } => "prompt_sent",
            Event::CompletionReceived { .. } => "completion_received",
            Event::CandidateParsed { .. } => "candidate_parsed",
            Event::GateVerdict { .. } => "gate_verdict",
            Event::EvaluationResult { .. } => "evaluation_result",
            Event::FrontSnapshot { .. } => "front_snapshot",
            Event::ExplanationRecorded { .. } => "explanation_recorded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    pub iteration: u32,
    pub ts_ms: u64,
    pub event: Event,
}

/// The timestamp-free part of an entry, used for digests.
#[derive(Serialize)]
struct Stable<'a> {
    seq: u64,
    iteration: u32,
    event: &'a Event,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// SHA-256 over the timestamp-free serialization of every entry, one per line.
pub fn ledger_digest(entries: &[LedgerEntry]) -> String {
    let mut h = Sha256::new();
    for e in entries {
        let stable = Stable { seq: e.seq, iteration: e.iteration, event: &e.event };
        h.update(serde_json::to_vec(&stable).expect("event serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub created_ms: u64,
    pub config: serde_json::Value,
}

/// Writes entries through to disk as they are appended.
pub struct LedgerWriter {
    path: PathBuf,
    file: File,
    entries: Vec<LedgerEntry>,
}

impl LedgerWriter {
    /// Creates the directory and manifest; refuses a directory that already has events.
    pub fn create(dir: &Path, manifest: &Manifest) -> Result<Self, LedgerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let events = dir.join(EVENTS_FILE);
        if events.metadata().map(|m| m.len() > 0).unwrap_or(false) {
            return Err(LedgerError::NotEmpty(dir.to_path_buf()));
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
        Self::append_to(dir)
    }

    /// Opens an existing ledger for further appends (e.g. recorded explanations).
    pub fn append_to(dir: &Path) -> Result<Self, LedgerError> {
        let path = dir.join(EVENTS_FILE);
        let entries = if path.exists() { read_events(&path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { path, file, entries })
    }

    pub fn append(&mut self, iteration: u32, event: Event) -> Result<&LedgerEntry, LedgerError> {
        let entry = LedgerEntry { seq: self.entries.len() as u64, iteration, ts_ms: now_ms(), event };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<LedgerEntry> {
        self.entries
    }
}

fn read_events(path: &Path) -> Result<Vec<LedgerEntry>, LedgerError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut entries: Vec<LedgerEntry> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| LedgerError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: LedgerEntry = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if let Some(prev) = entries.last() {
            if entry.seq <= prev.seq {
                return Err(corrupt(format!("seq {} does not follow {}", entry.seq, prev.seq)));
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// A loaded ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLedger {
    pub dir: PathBuf,
    pub manifest: Option<Manifest>,
    pub entries: Vec<LedgerEntry>,
}

impl RunLedger {
    pub fn load(dir: &Path) -> Result<Self, LedgerError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
            Some(serde_json::from_str(&text).map_err(|e| LedgerError::Corrupt {
                path: manifest_path.clone(),
                line: 0,
                message: e.to_string(),
            })?)
        } else {
            None
        };
        let events = dir.join(EVENTS_FILE);
        let entries = if events.exists() { read_events(&events)? } else { Vec::new() };
        Ok(Self { dir: dir.to_path_buf(), manifest, entries })
    }

    pub fn digest(&self) -> String {
        ledger_digest(&self.entries)
    }

    pub fn final_snapshot(&self) -> Option<&FrontSnapshot> {
        self.entries.iter().rev().find_map(|e| match &e.event {
            Event::FrontSnapshot { snapshot } => Some(snapshot),
            _ => None,
        })
    }

    pub fn records(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.entries.iter().filter_map(|e| match &e.event {
            Event::EvaluationResult { record: Some(r), .. } => Some(r),
            _ => None,
        })
    }

    pub fn count(&self, kind: &str) -> usize {
        self.entries.iter().filter(|e| e.event.kind() == kind).count()
    }
}

/// Rebuilds the front from evaluation events alone.
pub fn replay_entries(entries: &[LedgerEntry]) -> ParetoFront {
    let mut front = ParetoFront::new();
    for e in entries {
        if let Event::EvaluationResult { record: Some(r), .. } = &e.event {
            front.update(r.clone());
        }
    }
    front
}

pub fn replay(dir: &Path) -> Result<ParetoFront, LedgerError> {
    Ok(replay_entries(&RunLedger::load(dir)?.entries))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotMismatch {
    pub seq: u64,
    pub stored: String,
    pub replayed: String,
}

/// Replays incrementally and compares the serialized front at every stored
/// snapshot. Returns the number of snapshots checked.
pub fn verify_snapshots(entries: &[LedgerEntry]) -> Result<usize, SnapshotMismatch> {
    let mut front = ParetoFront::new();
    let mut checked = 0;
    for e in entries {
        match &e.event {
            Event::EvaluationResult { record: Some(r), .. } => {
                front.update(r.clone());
            }
            Event::FrontSnapshot { snapshot } => {
                let stored = serde_json::to_string(snapshot).expect("snapshot serializes");
                let replayed = serde_json::to_string(&front.snapshot()).expect("snapshot serializes");
                if stored != replayed {
                    return Err(SnapshotMismatch { seq: e.seq, stored, replayed });
                }
                checked += 1;
            }
            _ => {}
        }
    }
    Ok(checked)
}
