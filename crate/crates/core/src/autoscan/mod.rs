//! Evidence curation: incremental session scans, chunk tagging, and the
//! per-conversation open batch.

mod evaluator;
mod slice;

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tracing::warn;

pub use evaluator::{ChunkEvaluator, EvaluatorScript, RunnerEvaluator, ScriptedEvaluator};
pub use slice::{slice_session, CandidateChunk, PositionedRecord, SessionRecord, Slice};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::ids::{content_id, new_id};
use crate::model::{doc_version, Batch, BatchState, ChunkRecord, Level, DEFAULT_SEAL_THRESHOLD};
use crate::par::{self, Parallelism};
use crate::store::{StateKey, StateStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCursor {
    #[serde(default = "doc_version")]
    pub version: u32,
    pub session_id: String,
    pub byte_offset: u64,
    pub last_turn_index: i64,
}

impl SessionCursor {
    pub fn fresh(session_id: &str) -> Self {
        Self {
            version: doc_version(),
            session_id: session_id.to_string(),
            byte_offset: 0,
            last_turn_index: -1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub chunks_admitted: u32,
    pub batches_sealed: u32,
    pub sessions_scanned: u32,
    pub chunks_scanned: u32,
    pub malformed_records: u32,
    pub evaluator_failures: u32,
}

impl ScanReport {
    fn absorb(&mut self, other: &ScanReport) {
        self.chunks_admitted += other.chunks_admitted;
        self.batches_sealed += other.batches_sealed;
        self.sessions_scanned += other.sessions_scanned;
        self.chunks_scanned += other.chunks_scanned;
        self.malformed_records += other.malformed_records;
        self.evaluator_failures += other.evaluator_failures;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmitDecision {
    pub admitted: bool,
    pub sealed: bool,
    pub tags: Vec<(String, Level)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSource {
    pub session_id: String,
    pub path: PathBuf,
}

/// Result of reading one session from its cursor; no state has been written yet.
struct SessionScan {
    source: SessionSource,
    cursor: SessionCursor,
    tagged: Vec<(ChunkRecord, Result<Vec<(String, Level)>>)>,
    report: ScanReport,
}

#[derive(Debug, Clone)]
pub struct AutoScanConfig {
    /// Directories holding `<session_id>.jsonl` logs, one per agent.
    pub session_dirs: Vec<PathBuf>,
    pub seal_threshold: usize,
    pub parallelism: Parallelism,
}

impl Default for AutoScanConfig {
    fn default() -> Self {
        Self {
            session_dirs: Vec::new(),
            seal_threshold: DEFAULT_SEAL_THRESHOLD,
            parallelism: Parallelism::default(),
        }
    }
}

pub struct AutoScan {
    store: StateStore,
    config: AutoScanConfig,
    evaluator: Arc<dyn ChunkEvaluator>,
    clock: Arc<dyn Clock>,
    session_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    conversation_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AutoScan {
    pub fn new(
        store: StateStore,
        config: AutoScanConfig,
        evaluator: Arc<dyn ChunkEvaluator>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            store,
            config,
            evaluator,
            clock,
            session_locks: Mutex::default(),
            conversation_locks: Mutex::default(),
        }
    }

    pub fn store(&self) -> &StateStore {
        &self.store
    }

    pub fn discover(&self) -> Result<Vec<SessionSource>> {
        let mut out = Vec::new();
        for dir in &self.config.session_dirs {
            let entries = match std::fs::read_dir(dir) {
                Ok(e) => e,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            for entry in entries {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                    continue;
                }
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.push(SessionSource { session_id: stem.to_string(), path });
                }
            }
        }
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id).then(a.path.cmp(&b.path)));
        out.dedup_by(|a, b| a.session_id == b.session_id);
        Ok(out)
    }

    /// Scans every known session from its cursor to EOF.
    pub fn catch_up(&self) -> Result<ScanReport> {
        let sources = self.discover()?;
        self.scan(sources)
    }

    /// Same scan as [`catch_up`](Self::catch_up), restricted to one session.
    pub fn flag(&self, session_id: &str) -> Result<ScanReport> {
        let source = self
            .discover()?
            .into_iter()
            .find(|s| s.session_id == session_id)
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))?;
        self.scan(vec![source])
    }

    fn scan(&self, sources: Vec<SessionSource>) -> Result<ScanReport> {
        // Sessions are locked in sorted order so concurrent scans cannot deadlock.
        let locks: Vec<Arc<Mutex<()>>> = sources
            .iter()
            .map(|s| lock_for(&self.session_locks, &s.session_id))
            .collect();
        let _guards: Vec<_> = locks.iter().map(|l| l.lock().unwrap()).collect();

        let scans = par::map(self.config.parallelism, sources, |src| self.read_session(src));

        let mut report = ScanReport::default();
        for scan in scans {
            let scan = scan?;
            report.absorb(&self.commit_scan(scan)?);
        }
        Ok(report)
    }

    fn read_session(&self, source: SessionSource) -> Result<SessionScan> {
        let cursor = self
            .store
            .read_json::<SessionCursor>(&StateKey::Cursor { session_id: source.session_id.clone() })?
            .unwrap_or_else(|| SessionCursor::fresh(&source.session_id));
        let (records, malformed, eof) = read_records(&source, &cursor)?;
        let mut report = ScanReport {
            sessions_scanned: 1,
            malformed_records: malformed,
            ..ScanReport::default()
        };

        let plain: Vec<SessionRecord> = records.iter().map(|r| r.record.clone()).collect();
        let slice = slice_session(&plain);
        let (byte_offset, last_turn_index) = match slice.held_from {
            Some(i) => (
                records[i].start,
                if i == 0 { cursor.last_turn_index } else { records[i - 1].record.turn_index },
            ),
            None => (eof, records.last().map_or(cursor.last_turn_index, |r| r.record.turn_index)),
        };

        let now = self.clock.now();
        let tagged = slice
            .chunks
            .into_iter()
            .map(|c| {
                let span = c.turn_span();
                let chunk = ChunkRecord {
                    chunk_id: chunk_id(&source.session_id, span),
                    session_id: source.session_id.clone(),
                    conversation_id: c.conversation_id,
                    turn_span: span,
                    transcript: c.transcript,
                    keypoint_tags: Vec::new(),
                    captured_at: now,
                };
                let tags = self.evaluator.evaluate(&chunk.transcript).and_then(|t| {
                    evaluator::check_tags(&t)?;
                    Ok(t)
                });
                (chunk, tags)
            })
            .collect::<Vec<_>>();
        report.chunks_scanned = tagged.len() as u32;

        Ok(SessionScan {
            cursor: SessionCursor {
                version: doc_version(),
                session_id: source.session_id.clone(),
                byte_offset: byte_offset.max(cursor.byte_offset),
                last_turn_index,
            },
            source,
            tagged,
            report,
        })
    }

    fn commit_scan(&self, scan: SessionScan) -> Result<ScanReport> {
        let mut report = scan.report;
        for (mut chunk, tags) in scan.tagged {
            let tags = match tags {
                Ok(t) => t,
                Err(e) => {
                    warn!(session = %scan.source.session_id, chunk = %chunk.chunk_id, error = %e, "chunk evaluation failed; skipping");
                    report.evaluator_failures += 1;
                    continue;
                }
            };
            chunk.keypoint_tags = tags;
            let decision = self.admit_tagged(chunk)?;
            if decision.admitted {
                report.chunks_admitted += 1;
            }
            if decision.sealed {
                report.batches_sealed += 1;
            }
        }
        // Batches are written before the cursor: a crash in between re-reads
        // chunks that the duplicate check then discards.
        self.store.write_json(
            &StateKey::Cursor { session_id: scan.source.session_id.clone() },
            &scan.cursor,
        )?;
        Ok(report)
    }

    /// Evaluates a chunk and appends it to its conversation's open batch when
    /// any tag is weak or missing.
    pub fn admit_chunk(&self, mut chunk: ChunkRecord) -> Result<AdmitDecision> {
        let tags = self.evaluator.evaluate(&chunk.transcript)?;
        evaluator::check_tags(&tags)?;
        chunk.keypoint_tags = tags;
        self.admit_tagged(chunk)
    }

    fn admit_tagged(&self, chunk: ChunkRecord) -> Result<AdmitDecision> {
        let tags = chunk.keypoint_tags.clone();
        if !chunk.is_failure_evidence() {
            return Ok(AdmitDecision { admitted: false, sealed: false, tags });
        }
        let lock = lock_for(&self.conversation_locks, &chunk.conversation_id);
        let _guard = lock.lock().unwrap();

        let conversation_id = chunk.conversation_id.clone();
        let batches = self.load_batches(&conversation_id)?;
        if batches.iter().any(|b| b.contains_chunk(&chunk.chunk_id)) {
            return Ok(AdmitDecision { admitted: false, sealed: false, tags });
        }
        let now = self.clock.now();
        let mut open = match open_of(&batches)? {
            Some(b) => b.clone(),
            None => Batch::open(new_id("batch"), conversation_id.clone(), self.config.seal_threshold, now),
        };
        let sealed = open.append(chunk, now)?;
        self.write_batch(&open)?;
        if sealed {
            let fresh = Batch::open(new_id("batch"), conversation_id, self.config.seal_threshold, now);
            self.write_batch(&fresh)?;
        }
        Ok(AdmitDecision { admitted: true, sealed, tags })
    }

    pub fn load_batches(&self, conversation_id: &str) -> Result<Vec<Batch>> {
        load_batches(&self.store, conversation_id)
    }

    /// The conversation's open batch, if one exists.
    pub fn open_batch(&self, conversation_id: &str) -> Result<Option<Batch>> {
        Ok(open_of(&self.load_batches(conversation_id)?)?.cloned())
    }

    fn write_batch(&self, batch: &Batch) -> Result<()> {
        batch.check()?;
        self.store.write_json(
            &StateKey::Batch {
                conversation_id: batch.conversation_id.clone(),
                batch_id: batch.batch_id.clone(),
            },
            batch,
        )
    }
}

pub fn load_batches(store: &StateStore, conversation_id: &str) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    for batch_id in store.batch_ids(conversation_id)? {
        let key = StateKey::Batch { conversation_id: conversation_id.to_string(), batch_id };
        if let Some(b) = store.read_json::<Batch>(&key)? {
            out.push(b);
        }
    }
    Ok(out)
}

fn open_of(batches: &[Batch]) -> Result<Option<&Batch>> {
    let mut open = batches.iter().filter(|b| b.state == BatchState::Open);
    let first = open.next();
    if let Some(second) = open.next() {
        return Err(Error::Invariant(format!(
            "conversation {} has more than one open batch ({} and {})",
            second.conversation_id,
            first.map(|b| b.batch_id.as_str()).unwrap_or_default(),
            second.batch_id
        )));
    }
    Ok(first)
}

pub fn chunk_id(session_id: &str, span: (i64, i64)) -> String {
    content_id("chunk", &[session_id, &span.0.to_string(), &span.1.to_string()])
}

fn lock_for(map: &Mutex<HashMap<String, Arc<Mutex<()>>>>, key: &str) -> Arc<Mutex<()>> {
    map.lock().unwrap().entry(key.to_string()).or_default().clone()
}

/// Reads complete lines after the cursor. Returns valid records, the number of
/// malformed lines skipped, and the byte offset just past the last complete line.
fn read_records(
    source: &SessionSource,
    cursor: &SessionCursor,
) -> Result<(Vec<PositionedRecord>, u32, u64)> {
    let mut file = File::open(&source.path)?;
    let len = file.metadata()?.len();
    if len < cursor.byte_offset {
        return Err(Error::Invariant(format!(
            "session {} shrank below its cursor ({} < {})",
            source.session_id, len, cursor.byte_offset
        )));
    }
    file.seek(SeekFrom::Start(cursor.byte_offset))?;
    let mut buf = Vec::with_capacity((len - cursor.byte_offset) as usize);
    file.read_to_end(&mut buf)?;

    let mut records = Vec::new();
    let mut malformed = 0;
    let mut pos = 0usize;
    let mut last_turn = cursor.last_turn_index;
    while let Some(nl) = buf[pos..].iter().position(|b| *b == b'\n') {
        let line = &buf[pos..pos + nl];
        let start = cursor.byte_offset + pos as u64;
        let end = start + nl as u64 + 1;
        pos += nl + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match parse_record(line, &source.session_id, last_turn) {
            Ok(record) => {
                last_turn = record.turn_index;
                records.push(PositionedRecord { start, end, record });
            }
            Err(e) => {
                warn!(session = %source.session_id, offset = start, error = %e, "skipping malformed record");
                malformed += 1;
            }
        }
    }
    Ok((records, malformed, cursor.byte_offset + pos as u64))
}

fn parse_record(line: &[u8], session_id: &str, last_turn: i64) -> Result<SessionRecord> {
    let rec: SessionRecord = serde_json::from_slice(line).map_err(|e| Error::MalformedRecord {
        offset: 0,
        reason: e.to_string(),
    })?;
    if rec.session_id != session_id {
        return Err(Error::MalformedRecord {
            offset: 0,
            reason: format!("record belongs to session {}", rec.session_id),
        });
    }
    if rec.turn_index <= last_turn {
        return Err(Error::MalformedRecord {
            offset: 0,
            reason: format!("turn_index {} does not follow {}", rec.turn_index, last_turn),
        });
    }
    crate::store::component(&rec.conversation_id)?;
    Ok(rec)
}

/// Convenience for tests and scenarios: the path a session log lives at.
pub fn session_path(dir: &Path, session_id: &str) -> PathBuf {
    dir.join(format!("{session_id}.jsonl"))
}
