//! Server-side request log used to audit which transport a client used.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Http,
    Rpc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficEntry {
    pub transport: Transport,
    /// `METHOD /path` for HTTP, the op name for RPC.
    pub label: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrafficLog {
    entries: Arc<Mutex<Vec<TrafficEntry>>>,
}

impl TrafficLog {
    pub fn record(&self, transport: Transport, label: impl Into<String>) {
        self.entries.lock().unwrap().push(TrafficEntry { transport, label: label.into() });
    }

    pub fn snapshot(&self) -> Vec<TrafficEntry> {
        self.entries.lock().unwrap().clone()
    }

    /// Returns and clears everything recorded so far.
    pub fn drain(&self) -> Vec<TrafficEntry> {
        std::mem::take(&mut *self.entries.lock().unwrap())
    }
}
