#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use moss_core::autoscan::{AutoScan, AutoScanConfig, ChunkEvaluator, SessionCursor, SessionRecord};
use moss_core::clock::ManualClock;
use moss_core::model::{transcript_hash, BatchState, Level, Role, TranscriptEntry};
use moss_core::par::Parallelism;
use moss_core::store::{StateKey, StateStore};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub conversation: String,
    pub roles: Vec<Role>,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub sessions: Vec<Session>,
    /// Per session, the record counts at which a scan happens (sorted).
    pub splits: Vec<Vec<usize>>,
    pub threshold: usize,
    pub restart_between_scans: bool,
}

fn role() -> impl Strategy<Value = Role> {
    prop_oneof![4 => Just(Role::User), 4 => Just(Role::Agent), 1 => Just(Role::Tool), 1 => Just(Role::System)]
}

/// A split before record `i` is allowed unless it would cut a finished-looking
/// agent reply off from a continuation of the same exchange.
fn allowed(roles: &[Role], i: usize) -> bool {
    i == 0 || i >= roles.len() || !(roles[i - 1] == Role::Agent && roles[i] != Role::User)
}

pub fn case() -> impl Strategy<Value = Case> {
    let session = (0usize..3, prop::collection::vec(role(), 0..24));
    (prop::collection::vec(session, 1..4), prop::collection::vec(any::<prop::sample::Index>(), 0..5), 1usize..5, any::<bool>())
        .prop_map(|(raw, picks, threshold, restart)| {
            let sessions: Vec<Session> = raw
                .into_iter()
                .enumerate()
                .map(|(i, (conv, roles))| Session { id: format!("s{i}"), conversation: format!("c{conv}"), roles })
                .collect();
            let splits = sessions
                .iter()
                .map(|s| {
                    let candidates: Vec<usize> = (1..s.roles.len()).filter(|&i| allowed(&s.roles, i)).collect();
                    let mut out: Vec<usize> = if candidates.is_empty() {
                        Vec::new()
                    } else {
                        picks.iter().map(|p| candidates[p.index(candidates.len())]).collect()
                    };
                    out.sort_unstable();
                    out.dedup();
                    out
                })
                .collect();
            Case { sessions, splits, threshold, restart_between_scans: restart }
        })
}

fn ts() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2026-02-01T00:00:00Z").unwrap().into()
}

fn line(s: &Session, i: usize) -> String {
    let rec = SessionRecord {
        ts: ts(),
        session_id: s.id.clone(),
        conversation_id: s.conversation.clone(),
        turn_index: i as i64,
        role: s.roles[i],
        content: format!("{}-{}-{:?}", s.id, i, s.roles[i]),
    };
    let mut l = serde_json::to_string(&rec).unwrap();
    l.push('\n');
    l
}

/// Writes records `[0, upto)` of the session (rewriting the whole file keeps
/// earlier bytes identical, so it is equivalent to appending).
fn write_prefix(dir: &Path, s: &Session, upto: usize) {
    let text: String = (0..upto.min(s.roles.len())).map(|i| line(s, i)).collect();
    std::fs::write(dir.join(format!("{}.jsonl", s.id)), text).unwrap();
}

fn evaluate(t: &[TranscriptEntry]) -> moss_core::Result<Vec<(String, Level)>> {
    let h = transcript_hash(t);
    let weak = u8::from_str_radix(&h[..1], 16).unwrap() % 3 != 0;
    let level = if weak { Level::Weak } else { Level::Strong };
    Ok((0..4).map(|k| (format!("k{k}"), level)).collect())
}

pub struct Harness {
    _tmp: tempfile::TempDir,
    pub sessions: std::path::PathBuf,
    pub store: StateStore,
    threshold: usize,
}

impl Harness {
    pub fn new(threshold: usize) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let sessions = tmp.path().join("sessions");
        std::fs::create_dir_all(&sessions).unwrap();
        let store = StateStore::open(tmp.path().join("state")).unwrap();
        Self { _tmp: tmp, sessions, store, threshold }
    }

    /// A fresh instance over the same state, as after a process restart.
    pub fn scanner(&self) -> AutoScan {
        let evaluator: Arc<dyn ChunkEvaluator> =
            Arc::new(evaluate as fn(&[TranscriptEntry]) -> moss_core::Result<Vec<(String, Level)>>);
        AutoScan::new(
            self.store.clone(),
            AutoScanConfig {
                session_dirs: vec![self.sessions.clone()],
                seal_threshold: self.threshold,
                parallelism: Parallelism::Sequential,
            },
            evaluator,
            Arc::new(ManualClock::default()),
        )
    }

    pub fn cursor(&self, session: &str) -> Option<SessionCursor> {
        self.store.read_json(&StateKey::Cursor { session_id: session.to_string() }).unwrap()
    }

    pub fn admitted(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for conv in self.store.conversations().unwrap() {
            for b in moss_core::autoscan::load_batches(&self.store, &conv).unwrap() {
                out.extend(b.chunks.iter().map(|c| c.chunk_id.clone()));
            }
        }
        out
    }

    /// Open batch count per conversation and whether every batch obeys the
    /// seal rule.
    pub fn batch_shape(&self) -> (BTreeMap<String, usize>, Result<(), String>) {
        let mut open = BTreeMap::new();
        let mut verdict = Ok(());
        for conv in self.store.conversations().unwrap() {
            for b in moss_core::autoscan::load_batches(&self.store, &conv).unwrap() {
                match b.state {
                    BatchState::Open => {
                        *open.entry(conv.clone()).or_insert(0) += 1;
                        if b.chunks.len() >= self.threshold {
                            verdict = Err(format!("open batch {} holds {} chunks", b.batch_id, b.chunks.len()));
                        }
                    }
                    _ if b.chunks.len() != self.threshold => {
                        verdict = Err(format!("sealed batch {} holds {} chunks", b.batch_id, b.chunks.len()));
                    }
                    _ => {}
                }
            }
        }
        (open, verdict)
    }
}

/// Scan schedule: the union of all split points, then the full length.
fn schedule(case: &Case) -> Vec<Vec<usize>> {
    let steps = case.splits.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for step in 0..steps {
        out.push(
            case.sessions
                .iter()
                .zip(&case.splits)
                .map(|(s, sp)| sp.get(step).copied().or(sp.last().copied()).unwrap_or(0).min(s.roles.len()))
                .collect(),
        );
    }
    out.push(case.sessions.iter().map(|s| s.roles.len()).collect());
    out
}

/// Runs the incremental schedule, checking the per-scan properties, and
/// returns the admitted chunk ids.
fn incremental(case: &Case) -> Result<BTreeSet<String>, TestCaseError> {
    let h = Harness::new(case.threshold);
    let mut scanner = h.scanner();
    let mut last: BTreeMap<String, (u64, i64)> = BTreeMap::new();
    for upto in schedule(case) {
        for (s, n) in case.sessions.iter().zip(&upto) {
            write_prefix(&h.sessions, s, *n);
        }
        if case.restart_between_scans {
            scanner = h.scanner();
        }
        scanner.catch_up().map_err(|e| TestCaseError::fail(e.to_string()))?;
        for s in &case.sessions {
            if let Some(c) = h.cursor(&s.id) {
                let prev = last.get(&s.id).copied().unwrap_or((0, -1));
                prop_assert!(c.byte_offset >= prev.0, "byte offset went back: {} < {}", c.byte_offset, prev.0);
                prop_assert!(c.last_turn_index >= prev.1, "turn index went back");
                last.insert(s.id.clone(), (c.byte_offset, c.last_turn_index));
            }
        }
        let (open, shape) = h.batch_shape();
        prop_assert!(shape.is_ok(), "{:?}", shape);
        prop_assert!(open.values().all(|n| *n <= 1), "several open batches: {:?}", open);
    }
    Ok(h.admitted())
}

fn full(case: &Case) -> Result<BTreeSet<String>, TestCaseError> {
    let h = Harness::new(case.threshold);
    for s in &case.sessions {
        write_prefix(&h.sessions, s, s.roles.len());
    }
    h.scanner().catch_up().map_err(|e| TestCaseError::fail(e.to_string()))?;
    Ok(h.admitted())
}

/// Cursor monotonicity, seal exactness and one open batch per conversation
/// (with restarts when the case asks for them).
pub fn per_scan_properties(case: Case) -> Result<(), TestCaseError> {
    incremental(&case).map(|_| ())
}

pub fn incremental_matches_full(case: Case) -> Result<(), TestCaseError> {
    let a = incremental(&case)?;
    let b = full(&case)?;
    prop_assert_eq!(a, b);
    Ok(())
}

pub fn restarts_keep_one_open_batch(mut case: Case) -> Result<(), TestCaseError> {
    case.restart_between_scans = true;
    incremental(&case).map(|_| ())
}
