use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{Role, TranscriptEntry};

/// One line of a session JSONL log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub ts: DateTime<Utc>,
    pub session_id: String,
    pub conversation_id: String,
    pub turn_index: i64,
    pub role: Role,
    pub content: String,
}

impl SessionRecord {
    pub fn entry(&self) -> TranscriptEntry {
        TranscriptEntry {
            turn_index: self.turn_index,
            role: self.role,
            content: self.content.clone(),
            ts: self.ts,
        }
    }
}

/// A parsed record together with the byte range of its line in the file.
#[derive(Debug, Clone)]
pub struct PositionedRecord {
    pub start: u64,
    pub end: u64,
    pub record: SessionRecord,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateChunk {
    pub conversation_id: String,
    pub transcript: Vec<TranscriptEntry>,
}

impl CandidateChunk {
    pub fn turn_span(&self) -> (i64, i64) {
        (
            self.transcript.first().map_or(0, |e| e.turn_index),
            self.transcript.last().map_or(0, |e| e.turn_index),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub chunks: Vec<CandidateChunk>,
    /// Index into the input of the first record that was held back, if any.
    pub held_from: Option<usize>,
}

/// Splits records into user-turn-led exchanges.
///
/// A chunk runs from a user turn up to the record before the next user turn.
/// The final chunk is emitted only once it ends with an agent reply; a
/// trailing user turn with no reply yet (or a reply still in progress) is
/// held for a later scan. Records that precede any user turn are dropped.
pub fn slice_session(records: &[SessionRecord]) -> Slice {
    let mut chunks = Vec::new();
    let mut open: Option<(usize, CandidateChunk)> = None;
    for (i, rec) in records.iter().enumerate() {
        if rec.role == Role::User {
            if let Some((_, done)) = open.take() {
                chunks.push(done);
            }
            open = Some((
                i,
                CandidateChunk {
                    conversation_id: rec.conversation_id.clone(),
                    transcript: vec![rec.entry()],
                },
            ));
        } else if let Some((_, chunk)) = open.as_mut() {
            chunk.transcript.push(rec.entry());
        }
    }
    let mut held_from = None;
    if let Some((start, tail)) = open {
        let answered = tail.transcript.len() > 1
            && tail.transcript.last().map(|e| e.role) == Some(Role::Agent);
        if answered {
            chunks.push(tail);
        } else {
            held_from = Some(start);
        }
    }
    Slice { chunks, held_from }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn recs(roles: &[Role]) -> Vec<SessionRecord> {
        roles
            .iter()
            .enumerate()
            .map(|(i, r)| SessionRecord {
                ts: DateTime::parse_from_rfc3339("2026-01-01T00:00:00Z").unwrap().into(),
                session_id: "s".into(),
                conversation_id: "c".into(),
                turn_index: i as i64,
                role: *r,
                content: format!("m{i}"),
            })
            .collect()
    }

    use Role::*;

    #[test]
    fn two_exchanges() {
        let s = slice_session(&recs(&[User, Agent, User, Agent]));
        assert_eq!(s.chunks.len(), 2);
        assert!(s.chunks.iter().all(|c| c.transcript.len() == 2));
        assert_eq!(s.held_from, None);
    }

    #[test]
    fn tool_turns_stay_in_the_exchange() {
        let s = slice_session(&recs(&[User, Agent, Tool, Agent]));
        assert_eq!(s.chunks.len(), 1);
        assert_eq!(s.chunks[0].transcript.len(), 4);
    }

    #[test]
    fn dangling_user_turn_is_held() {
        let s = slice_session(&recs(&[User, Agent, User]));
        assert_eq!(s.chunks.len(), 1);
        assert_eq!(s.held_from, Some(2));
        // once the reply lands, exactly the second exchange appears
        let all = recs(&[User, Agent, User, Agent]);
        let again = slice_session(&all[2..]);
        assert_eq!(again.chunks.len(), 1);
        assert_eq!(again.chunks[0].turn_span(), (2, 3));
    }

    #[test]
    fn reply_in_progress_is_held() {
        let s = slice_session(&recs(&[User, Tool]));
        assert!(s.chunks.is_empty());
        assert_eq!(s.held_from, Some(0));
    }

    #[test]
    fn leading_orphans_are_dropped() {
        let s = slice_session(&recs(&[Agent, Tool, User, Agent]));
        assert_eq!(s.chunks.len(), 1);
        assert_eq!(s.chunks[0].turn_span(), (2, 3));
    }
}
