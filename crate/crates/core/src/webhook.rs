//! Webhook events posted to the gateway's hook endpoint.

use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WebhookEvent {
    EvolutionConverged,
    EvolutionFailed,
    ApplyComplete,
}

impl WebhookEvent {
    pub const ALL: [WebhookEvent; 3] =
        [WebhookEvent::EvolutionConverged, WebhookEvent::EvolutionFailed, WebhookEvent::ApplyComplete];

    pub fn as_str(self) -> &'static str {
        match self {
            WebhookEvent::EvolutionConverged => "evolution-converged",
            WebhookEvent::EvolutionFailed => "evolution-failed",
            WebhookEvent::ApplyComplete => "apply-complete",
        }
    }
}

impl std::fmt::Display for WebhookEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const STATUS_SUCCESS: &str = "success";
pub const STATUS_ROLLED_BACK: &str = "rolled-back";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebhookPayload {
    pub event: WebhookEvent,
    pub run_id: String,
    pub batch_id: String,
    pub status: String,
    pub detail: String,
    pub ts: DateTime<Utc>,
    /// Stable per logical notification; receivers drop repeats.
    pub delivery_id: String,
}

pub trait WebhookSink: Send + Sync {
    fn deliver(&self, payload: &WebhookPayload) -> Result<()>;
}

/// Delivers and logs failure; delivery never blocks a state transition.
pub fn fire(sink: &dyn WebhookSink, payload: &WebhookPayload) -> bool {
    match sink.deliver(payload) {
        Ok(()) => {
            tracing::info!(event = %payload.event, run = %payload.run_id, status = %payload.status, "webhook delivered");
            true
        }
        Err(e) => {
            tracing::warn!(event = %payload.event, run = %payload.run_id, error = %e, "webhook delivery failed");
            false
        }
    }
}

pub const DEFAULT_ATTEMPTS: u32 = 3;

/// POSTs JSON, retrying with doubling backoff.
pub struct HttpWebhookSink {
    url: String,
    attempts: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

impl HttpWebhookSink {
    pub fn new(url: impl Into<String>) -> Self {
        // Deliveries are rare; a pooled connection the receiver has since
        // dropped can stall a POST until the timeout.
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(10)))
            .max_idle_connections(0)
            .build()
            .into();
        Self { url: url.into(), attempts: DEFAULT_ATTEMPTS, backoff: Duration::from_millis(200), agent }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl WebhookSink for HttpWebhookSink {
    fn deliver(&self, payload: &WebhookPayload) -> Result<()> {
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            match self.agent.post(&self.url).send_json(payload) {
                Ok(_) => return Ok(()),
                Err(e) => {
                    tracing::debug!(attempt, error = %e, url = %self.url, "webhook attempt failed");
                    last = e.to_string();
                }
            }
            if attempt < self.attempts {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
        }
        Err(Error::DeliveryFailed { attempts: self.attempts, reason: last })
    }
}

/// Keeps payloads in memory; used by tests and single-process deployments.
#[derive(Debug, Default)]
pub struct RecordingSink {
    delivered: Mutex<Vec<WebhookPayload>>,
}

impl RecordingSink {
    pub fn payloads(&self) -> Vec<WebhookPayload> {
        self.delivered.lock().unwrap().clone()
    }
}

impl WebhookSink for RecordingSink {
    fn deliver(&self, payload: &WebhookPayload) -> Result<()> {
        self.delivered.lock().unwrap().push(payload.clone());
        Ok(())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl WebhookSink for NullSink {
    fn deliver(&self, _: &WebhookPayload) -> Result<()> {
        Ok(())
    }
}
