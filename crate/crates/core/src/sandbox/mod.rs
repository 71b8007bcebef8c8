//! Stand-in for the substrate: the gateway hosting the evolution-control
//! endpoints, webhook-to-message delivery, heartbeats, session fixtures, and a
//! fully wired local stack used by the end-to-end tests and `moss sandbox`.

mod gateway;
mod scenario;
mod stack;

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use gateway::{Gateway, GatewayConfig};
pub use scenario::{converge_script, generate_sessions, keypoints, Scenario, CASE_STUDY_TASKS, SCENARIOS};
pub use stack::{Stack, StackOptions};

use crate::error::{Error, Result};
use crate::webhook::{WebhookEvent, WebhookPayload};

/// Event name to system-message template. `{run_id}`, `{batch_id}`,
/// `{status}` and `{detail}` are substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookMapping {
    pub templates: BTreeMap<String, String>,
}

impl Default for HookMapping {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            WebhookEvent::EvolutionConverged.as_str().to_string(),
            "[moss] Evolution run {run_id} on batch {batch_id} converged. A candidate is ready; ask the user whether to apply it.".to_string(),
        );
        templates.insert(
            WebhookEvent::EvolutionFailed.as_str().to_string(),
            "[moss] Evolution run {run_id} on batch {batch_id} ended with {status}: {detail}".to_string(),
        );
        templates.insert(
            WebhookEvent::ApplyComplete.as_str().to_string(),
            "[moss] Apply of batch {batch_id} finished: {status}.".to_string(),
        );
        Self { templates }
    }
}

impl HookMapping {
    pub fn check(&self) -> Result<()> {
        for e in WebhookEvent::ALL {
            if !self.templates.contains_key(e.as_str()) {
                return Err(Error::Invariant(format!("no hook mapping for {}", e.as_str())));
            }
        }
        Ok(())
    }

    pub fn render(&self, p: &WebhookPayload) -> Result<String> {
        let t = self
            .templates
            .get(p.event.as_str())
            .ok_or_else(|| Error::BadRequest(format!("no mapping for event {}", p.event.as_str())))?;
        Ok(t.replace("{run_id}", &p.run_id)
            .replace("{batch_id}", &p.batch_id)
            .replace("{status}", &p.status)
            .replace("{detail}", &p.detail))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemMessage {
    pub ts: DateTime<Utc>,
    pub event: WebhookEvent,
    pub delivery_id: String,
    pub status: String,
    pub rendered_text: String,
}

#[derive(Default)]
struct LogInner {
    messages: Vec<SystemMessage>,
    seen: HashSet<String>,
    received: Vec<String>,
}

/// Append-only log of messages queued for the agent's next turn. A redelivery
/// of the same `delivery_id` is acknowledged but not appended twice.
#[derive(Clone, Default)]
pub struct SystemMessageLog {
    inner: Arc<Mutex<LogInner>>,
}

impl SystemMessageLog {
    /// Returns whether the message was new.
    pub fn deliver(&self, mapping: &HookMapping, payload: &WebhookPayload, now: DateTime<Utc>) -> Result<bool> {
        let text = mapping.render(payload)?;
        let mut inner = self.inner.lock().unwrap();
        inner.received.push(payload.delivery_id.clone());
        if !inner.seen.insert(payload.delivery_id.clone()) {
            return Ok(false);
        }
        inner.messages.push(SystemMessage {
            ts: now,
            event: payload.event,
            delivery_id: payload.delivery_id.clone(),
            status: payload.status.clone(),
            rendered_text: text,
        });
        Ok(true)
    }

    pub fn messages(&self) -> Vec<SystemMessage> {
        self.inner.lock().unwrap().messages.clone()
    }

    /// Raw POSTs received, duplicates included.
    pub fn received(&self) -> usize {
        self.inner.lock().unwrap().received.len()
    }

    /// Raw POSTs carrying `delivery_id`, duplicates included.
    pub fn deliveries(&self, delivery_id: &str) -> usize {
        self.inner.lock().unwrap().received.iter().filter(|d| *d == delivery_id).count()
    }
}
