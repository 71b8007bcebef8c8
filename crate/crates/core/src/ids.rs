//! Sortable opaque identifiers.

use sha2::{Digest, Sha256};

/// ULID with a short type prefix, e.g. `run-01J...`. Lowercased so it is a
/// valid path component everywhere.
pub fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", ulid::Ulid::new().to_string().to_ascii_lowercase())
}

/// Stable identifier derived from content, for objects that must dedupe.
pub fn content_id(prefix: &str, parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    format!("{prefix}-{}", &hex::encode(h.finalize())[..20])
}
