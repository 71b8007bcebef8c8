use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
    System,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn_index: i64,
    pub role: Role,
    pub content: String,
    pub ts: DateTime<Utc>,
}

/// Content hash over (role, content) pairs; timestamps and turn indices do not
/// participate, so the same exchange replayed elsewhere hashes identically.
pub fn transcript_hash(entries: &[TranscriptEntry]) -> String {
    let pairs: Vec<(Role, &str)> = entries.iter().map(|e| (e.role, e.content.as_str())).collect();
    let canonical = serde_json::to_vec(&pairs).expect("serializing plain pairs");
    hex::encode(Sha256::digest(canonical))
}
