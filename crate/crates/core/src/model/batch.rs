use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{doc_version, Level, TranscriptEntry};
use crate::error::{Error, Result};

pub const DEFAULT_SEAL_THRESHOLD: usize = 8;

/// One conversational exchange sliced out of a session log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub session_id: String,
    pub conversation_id: String,
    pub turn_span: (i64, i64),
    pub transcript: Vec<TranscriptEntry>,
    pub keypoint_tags: Vec<(String, Level)>,
    pub captured_at: DateTime<Utc>,
}

impl ChunkRecord {
    pub fn check(&self) -> Result<()> {
        if self.turn_span.0 > self.turn_span.1 {
            return Err(Error::Invariant(format!("chunk {} has an inverted turn span", self.chunk_id)));
        }
        if self.transcript.is_empty() {
            return Err(Error::Invariant(format!("chunk {} has an empty transcript", self.chunk_id)));
        }
        if self
            .transcript
            .windows(2)
            .any(|w| w[0].turn_index >= w[1].turn_index)
        {
            return Err(Error::Invariant(format!(
                "chunk {} transcript turn indices are not strictly increasing",
                self.chunk_id
            )));
        }
        Ok(())
    }

    pub fn is_failure_evidence(&self) -> bool {
        self.keypoint_tags.iter().any(|(_, l)| l.is_deficient())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchState {
    Open,
    Sealed,
    Evolving,
    ReadyToApply,
    Applied,
    Failed,
}

impl BatchState {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchState::Open => "open",
            BatchState::Sealed => "sealed",
            BatchState::Evolving => "evolving",
            BatchState::ReadyToApply => "ready_to_apply",
            BatchState::Applied => "applied",
            BatchState::Failed => "failed",
        }
    }

    /// Stopping an evolving batch returns it to `sealed`; restarting a failed
    /// batch moves it back to `evolving`.
    pub fn can_transition(self, to: BatchState) -> bool {
        use BatchState::*;
        matches!(
            (self, to),
            (Open, Sealed)
                | (Sealed, Evolving)
                | (Evolving, ReadyToApply)
                | (Evolving, Failed)
                | (Evolving, Sealed)
                | (ReadyToApply, Applied)
                | (Failed, Evolving)
        )
    }
}

impl fmt::Display for BatchState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    #[serde(default = "doc_version")]
    pub version: u32,
    pub batch_id: String,
    pub conversation_id: String,
    pub state: BatchState,
    pub chunks: Vec<ChunkRecord>,
    pub created_at: DateTime<Utc>,
    pub sealed_at: Option<DateTime<Utc>>,
    pub seal_threshold: usize,
}

impl Batch {
    pub fn open(
        batch_id: String,
        conversation_id: String,
        seal_threshold: usize,
        now: DateTime<Utc>,
    ) -> Self {
        Self {
            version: doc_version(),
            batch_id,
            conversation_id,
            state: BatchState::Open,
            chunks: Vec::new(),
            created_at: now,
            sealed_at: None,
            seal_threshold: seal_threshold.max(1),
        }
    }

    pub fn transition(&mut self, to: BatchState, now: DateTime<Utc>) -> Result<()> {
        if !self.state.can_transition(to) {
            return Err(Error::InvalidTransition {
                from: self.state.to_string(),
                to: to.to_string(),
            });
        }
        if to != BatchState::Open && self.chunks.is_empty() {
            return Err(Error::NoEligibleBatch);
        }
        if self.state == BatchState::Open && to == BatchState::Sealed {
            self.sealed_at = Some(now);
        }
        self.state = to;
        Ok(())
    }

    /// Appends an admitted chunk. Returns true when the append sealed the batch.
    pub fn append(&mut self, chunk: ChunkRecord, now: DateTime<Utc>) -> Result<bool> {
        if self.state != BatchState::Open {
            return Err(Error::InvalidTransition {
                from: self.state.to_string(),
                to: "append".into(),
            });
        }
        chunk.check()?;
        self.chunks.push(chunk);
        if self.chunks.len() >= self.seal_threshold {
            self.transition(BatchState::Sealed, now)?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn contains_chunk(&self, chunk_id: &str) -> bool {
        self.chunks.iter().any(|c| c.chunk_id == chunk_id)
    }

    pub fn check(&self) -> Result<()> {
        match self.state {
            BatchState::Open if self.chunks.len() >= self.seal_threshold => Err(Error::Invariant(
                format!("open batch {} reached its threshold", self.batch_id),
            )),
            s if s != BatchState::Open && self.chunks.is_empty() => Err(Error::Invariant(format!(
                "{s} batch {} has no chunks",
                self.batch_id
            ))),
            _ => Ok(()),
        }
    }
}
