//! Swap supervisor: promotes a candidate image in place, probes it, and
//! either commits or rolls back to the last-known-good image.
//!
//! Progress is journaled in `swap/journal.json` so a daemon killed mid-swap
//! can finish the job on restart. Outcomes are archived under
//! `swap/history/` before the apply-complete webhook fires, and the archive
//! records whether the notification went out, so it is sent once.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::images::{ImageRegistry, LastKnownGood};
use super::probe::{run_probe_window, HealthChecker, ProbeDecision, ProbeReport};
use super::runtime::{ContainerInfo, ContainerRole, ContainerRuntime, ContainerSpec, Mount, LIVE_NETWORK, STATE_MOUNT_TARGET};
use crate::autoscan::load_batches;
use crate::clock::{Clock, Timing};
use crate::error::{Error, Result};
use crate::ids::new_id;
use crate::model::{BatchState, ImageRef};
use crate::store::{StateKey, StateStore};
use crate::webhook::{fire, WebhookEvent, WebhookPayload, WebhookSink, STATUS_ROLLED_BACK, STATUS_SUCCESS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapRequest {
    pub request_id: String,
    pub candidate_image: ImageRef,
    pub batch_id: String,
    pub run_id: String,
    pub requested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapOutcome {
    Committed,
    RolledBack,
}

impl SwapOutcome {
    pub fn webhook_status(self) -> &'static str {
        match self {
            SwapOutcome::Committed => STATUS_SUCCESS,
            SwapOutcome::RolledBack => STATUS_ROLLED_BACK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JournalPhase {
    Claimed,
    OldStopped,
    CandidateStarted,
    Decided,
    Applied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapJournal {
    pub request: SwapRequest,
    pub phase: JournalPhase,
    pub old_container: Option<String>,
    pub candidate_container: Option<String>,
    pub outcome: Option<SwapOutcome>,
    pub reason: String,
    pub samples: Vec<ProbeReport>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub request: SwapRequest,
    pub outcome: SwapOutcome,
    pub reason: String,
    pub samples: Vec<ProbeReport>,
    pub completed_at: DateTime<Utc>,
    pub notified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaltState {
    pub reason: String,
    pub at: DateTime<Utc>,
}

/// Points where a test can make the supervisor die.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Claimed,
    OldStopped,
    CandidateStarted,
    ProbeStarted,
    OutcomeApplied,
    Archived,
}

impl Checkpoint {
    pub const ALL: [Checkpoint; 6] = [
        Checkpoint::Claimed,
        Checkpoint::OldStopped,
        Checkpoint::CandidateStarted,
        Checkpoint::ProbeStarted,
        Checkpoint::OutcomeApplied,
        Checkpoint::Archived,
    ];
}

pub struct SwapSupervisor {
    store: StateStore,
    runtime: Arc<dyn ContainerRuntime>,
    checker: HealthChecker,
    sink: Arc<dyn WebhookSink>,
    clock: Arc<dyn Clock>,
    timing: Timing,
    state_volume: PathBuf,
    gate: Arc<RwLock<()>>,
    crash_at: Mutex<Option<Checkpoint>>,
}

impl SwapSupervisor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: StateStore,
        runtime: Arc<dyn ContainerRuntime>,
        checker: HealthChecker,
        sink: Arc<dyn WebhookSink>,
        clock: Arc<dyn Clock>,
        timing: Timing,
        state_volume: impl Into<PathBuf>,
        gate: Arc<RwLock<()>>,
    ) -> Self {
        Self {
            store,
            runtime,
            checker,
            sink,
            clock,
            timing,
            state_volume: state_volume.into(),
            gate,
            crash_at: Mutex::new(None),
        }
    }

    /// Arms a one-shot simulated crash.
    pub fn crash_at(&self, checkpoint: Checkpoint) {
        *self.crash_at.lock().unwrap() = Some(checkpoint);
    }

    fn checkpoint(&self, c: Checkpoint) -> Result<()> {
        let mut armed = self.crash_at.lock().unwrap();
        if *armed == Some(c) {
            *armed = None;
            return Err(Error::SimulatedCrash(format!("{c:?}")));
        }
        Ok(())
    }

    pub fn halted(&self) -> Result<Option<HaltState>> {
        self.store.read_json(&StateKey::SwapHalted)
    }

    pub fn clear_halt(&self) -> Result<()> {
        self.store.remove(&StateKey::SwapHalted)
    }

    fn halt(&self, reason: String) -> Error {
        tracing::error!(%reason, "swap supervisor halted");
        let state = HaltState { reason: reason.clone(), at: self.clock.now() };
        if let Err(e) = self.store.write_json(&StateKey::SwapHalted, &state) {
            tracing::error!(error = %e, "could not persist halt state");
        }
        Error::SwapHalted(reason)
    }

    pub fn substrates(&self) -> Result<Vec<ContainerInfo>> {
        Ok(self
            .runtime
            .list()?
            .into_iter()
            .filter(|c| c.role == ContainerRole::Substrate)
            .collect())
    }

    /// Running substrate containers.
    pub fn live(&self) -> Result<Vec<ContainerInfo>> {
        Ok(self.substrates()?.into_iter().filter(|c| c.running).collect())
    }

    fn start_substrate(&self, image: &ImageRef) -> Result<ContainerInfo> {
        let spec = ContainerSpec {
            name: new_id("moss-substrate"),
            image_id: image.image_id.clone(),
            role: ContainerRole::Substrate,
            mounts: vec![Mount { source: self.state_volume.clone(), target: STATE_MOUNT_TARGET.into() }],
            network: LIVE_NETWORK.into(),
        };
        let info = self.runtime.start(&spec)?;
        if !info.running {
            let _ = self.runtime.stop(&info.id);
            return Err(Error::RuntimeFailure(format!("{} exited on start", image.image_id)));
        }
        Ok(info)
    }

    /// Records `image` as last-known-good and makes it the live container.
    /// Used for the first deployment only.
    pub fn deploy_initial(&self, image: &ImageRef) -> Result<ContainerInfo> {
        let _g = self.gate.write().unwrap();
        for c in self.substrates()? {
            self.runtime.stop(&c.id)?;
        }
        let info = self.start_substrate(image)?;
        let mut reg = ImageRegistry::load(&self.store)?;
        reg.record(image);
        reg.save(&self.store)?;
        LastKnownGood { image: image.clone(), recorded_at: self.clock.now() }.save(&self.store)?;
        Ok(info)
    }

    fn save_journal(&self, j: &mut SwapJournal) -> Result<()> {
        j.updated_at = self.clock.now();
        self.store.write_json(&StateKey::SwapJournal, j)
    }

    /// One poll: process a pending request if there is one.
    pub fn tick(&self) -> Result<Option<SwapOutcome>> {
        if let Some(h) = self.halted()? {
            return Err(Error::SwapHalted(h.reason));
        }
        let _g = self.gate.write().unwrap();
        if self.store.exists(&StateKey::SwapJournal)? {
            return self.finish_journal().map(Some);
        }
        let Some(bytes) = self.store.read(&StateKey::SwapRequest)? else {
            return Ok(None);
        };
        let request: SwapRequest = match serde_json::from_slice(&bytes) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(error = %e, "discarding malformed swap request");
                self.store.remove(&StateKey::SwapRequest)?;
                return Ok(None);
            }
        };
        let history = StateKey::SwapHistory { request_id: request.request_id.clone() };
        if self.store.exists(&history)? {
            tracing::info!(request = %request.request_id, "ignoring replayed swap request");
            self.store.remove(&StateKey::SwapRequest)?;
            return Ok(None);
        }
        self.execute(request).map(Some)
    }

    fn execute(&self, request: SwapRequest) -> Result<SwapOutcome> {
        tracing::info!(request = %request.request_id, image = %request.candidate_image.image_id, "swap claimed");
        let old = self.live()?.into_iter().next().map(|c| c.id);
        let mut j = SwapJournal {
            request,
            phase: JournalPhase::Claimed,
            old_container: old,
            candidate_container: None,
            outcome: None,
            reason: String::new(),
            samples: Vec::new(),
            updated_at: self.clock.now(),
        };
        self.save_journal(&mut j)?;
        self.store.remove(&StateKey::SwapRequest)?;
        self.checkpoint(Checkpoint::Claimed)?;

        let registered = ImageRegistry::load(&self.store)?.get(&j.request.candidate_image.image_id).is_some();
        if !registered {
            j.outcome = Some(SwapOutcome::RolledBack);
            j.reason = format!("candidate {} is not in the image registry", j.request.candidate_image.image_id);
            j.phase = JournalPhase::Decided;
            self.save_journal(&mut j)?;
            return self.finish(j);
        }

        for c in self.substrates()? {
            self.runtime.stop(&c.id)?;
        }
        j.phase = JournalPhase::OldStopped;
        self.save_journal(&mut j)?;
        self.checkpoint(Checkpoint::OldStopped)?;

        match self.start_substrate(&j.request.candidate_image) {
            Ok(info) => {
                j.candidate_container = Some(info.id);
                j.phase = JournalPhase::CandidateStarted;
                self.save_journal(&mut j)?;
                self.checkpoint(Checkpoint::CandidateStarted)?;
                let id = j.candidate_container.clone().unwrap_or_default();
                let window = run_probe_window(
                    self.timing.probe_samples(),
                    self.timing.real(self.timing.probe_interval),
                    self.timing.required_passes as usize,
                    self.clock.as_ref(),
                    |i| self.checker.probe(&id, i),
                    |i| if i == 0 { self.checkpoint(Checkpoint::ProbeStarted) } else { Ok(()) },
                )?;
                j.samples = window.samples;
                match window.decision {
                    ProbeDecision::Committed { at_sample } => {
                        j.outcome = Some(SwapOutcome::Committed);
                        j.reason = format!("three consecutive passes at sample {at_sample}");
                    }
                    ProbeDecision::RolledBack => {
                        j.outcome = Some(SwapOutcome::RolledBack);
                        j.reason = "probe window exhausted".into();
                    }
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "candidate failed to start");
                j.outcome = Some(SwapOutcome::RolledBack);
                j.reason = format!("candidate failed to start: {e}");
            }
        }
        j.phase = JournalPhase::Decided;
        self.save_journal(&mut j)?;
        self.finish(j)
    }

    /// Resumes an interrupted swap from its journal.
    fn finish_journal(&self) -> Result<SwapOutcome> {
        let mut j: SwapJournal = self
            .store
            .read_json(&StateKey::SwapJournal)?
            .ok_or_else(|| Error::Invariant("swap journal vanished".into()))?;
        tracing::warn!(request = %j.request.request_id, phase = ?j.phase, "resuming interrupted swap");
        if j.outcome.is_none() {
            j.outcome = Some(SwapOutcome::RolledBack);
            j.reason = format!("supervisor interrupted during {:?}", j.phase);
            j.phase = JournalPhase::Decided;
            self.save_journal(&mut j)?;
        }
        self.finish(j)
    }

    fn finish(&self, mut j: SwapJournal) -> Result<SwapOutcome> {
        let outcome = j.outcome.ok_or_else(|| Error::Invariant("undecided swap".into()))?;
        if j.phase == JournalPhase::Decided {
            self.apply_outcome(&j, outcome)?;
            j.phase = JournalPhase::Applied;
            self.save_journal(&mut j)?;
            self.checkpoint(Checkpoint::OutcomeApplied)?;
        }
        let record = SwapRecord {
            request: j.request.clone(),
            outcome,
            reason: j.reason.clone(),
            samples: j.samples.clone(),
            completed_at: self.clock.now(),
            notified: false,
        };
        let key = StateKey::SwapHistory { request_id: j.request.request_id.clone() };
        if !self.store.exists(&key)? {
            self.store.write_json(&key, &record)?;
        }
        self.store.remove(&StateKey::SwapJournal)?;
        self.checkpoint(Checkpoint::Archived)?;
        self.notify(&j.request.request_id)?;
        tracing::info!(request = %j.request.request_id, ?outcome, "swap finished");
        Ok(outcome)
    }

    /// Idempotent: converges the runtime on the decided outcome.
    fn apply_outcome(&self, j: &SwapJournal, outcome: SwapOutcome) -> Result<()> {
        match outcome {
            SwapOutcome::Committed => {
                let target = &j.request.candidate_image;
                self.converge_on(target)
                    .map_err(|e| Error::RuntimeFailure(format!("committing {}: {e}", target.image_id)))?;
                let mut reg = ImageRegistry::load(&self.store)?;
                reg.record(target);
                reg.tag(&target.image_id, "live")?;
                reg.save(&self.store)?;
                LastKnownGood { image: target.clone(), recorded_at: self.clock.now() }.save(&self.store)?;
                self.mark_batch_applied(&j.request.batch_id)?;
            }
            SwapOutcome::RolledBack => {
                let Some(lkg) = LastKnownGood::load(&self.store)? else {
                    return Err(self.halt("no last-known-good image to roll back to".into()));
                };
                if let Err(e) = self.converge_on(&lkg.image) {
                    return Err(self.halt(format!("rollback to {} failed: {e}", lkg.image.image_id)));
                }
            }
        }
        Ok(())
    }

    /// Leaves exactly one running substrate container, from `image`.
    fn converge_on(&self, image: &ImageRef) -> Result<()> {
        let mut keep = None;
        for c in self.substrates()? {
            if keep.is_none() && c.running && c.image_id == image.image_id {
                keep = Some(c.id);
            } else {
                self.runtime.stop(&c.id)?;
            }
        }
        if keep.is_none() {
            self.start_substrate(image)?;
        }
        Ok(())
    }

    fn mark_batch_applied(&self, batch_id: &str) -> Result<()> {
        for conv in self.store.conversations()? {
            for mut b in load_batches(&self.store, &conv)? {
                if b.batch_id == batch_id && b.state == BatchState::ReadyToApply {
                    b.transition(BatchState::Applied, self.clock.now())?;
                    self.store.write_json(
                        &StateKey::Batch { conversation_id: conv.clone(), batch_id: b.batch_id.clone() },
                        &b,
                    )?;
                }
            }
        }
        Ok(())
    }

    fn notify(&self, request_id: &str) -> Result<()> {
        let key = StateKey::SwapHistory { request_id: request_id.to_string() };
        let Some(mut record) = self.store.read_json::<SwapRecord>(&key)? else {
            return Ok(());
        };
        if record.notified {
            return Ok(());
        }
        let payload = WebhookPayload {
            event: WebhookEvent::ApplyComplete,
            run_id: record.request.run_id.clone(),
            batch_id: record.request.batch_id.clone(),
            status: record.outcome.webhook_status().into(),
            detail: record.reason.clone(),
            ts: self.clock.now(),
            delivery_id: format!("apply-{request_id}"),
        };
        fire(self.sink.as_ref(), &payload);
        record.notified = true;
        self.store.write_json(&key, &record)
    }

    /// Startup recovery: finish any journaled swap, send notifications that
    /// never went out, and make sure a substrate is live.
    pub fn recover(&self) -> Result<()> {
        let _g = self.gate.write().unwrap();
        if self.store.exists(&StateKey::SwapJournal)? {
            self.finish_journal()?;
        }
        for name in self.store.list("swap/history")? {
            if let Some(id) = name.strip_suffix(".json") {
                self.notify(id)?;
            }
        }
        if self.halted()?.is_none() && self.live()?.is_empty() {
            if let Some(lkg) = LastKnownGood::load(&self.store)? {
                tracing::warn!(image = %lkg.image.image_id, "no live substrate; starting last-known-good");
                if let Err(e) = self.converge_on(&lkg.image) {
                    return Err(self.halt(format!("starting last-known-good failed: {e}")));
                }
            }
        }
        Ok(())
    }

    pub fn history(&self, request_id: &str) -> Result<Option<SwapRecord>> {
        self.store.read_json(&StateKey::SwapHistory { request_id: request_id.to_string() })
    }

    pub fn poll_interval(&self) -> std::time::Duration {
        self.timing.real(self.timing.swap_poll)
    }
}
