//! Post-swap health probes and the probe-window decision.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::runtime::ContainerRuntime;
use crate::clock::Clock;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeChecks {
    pub heartbeat_fresh: bool,
    pub container_running: bool,
    pub cli_probe_a: bool,
    pub cli_probe_b: bool,
}

impl ProbeChecks {
    pub fn all(self) -> bool {
        self.heartbeat_fresh && self.container_running && self.cli_probe_a && self.cli_probe_b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub sample_index: usize,
    pub ts: DateTime<Utc>,
    pub checks: ProbeChecks,
    pub pass: bool,
}

impl ProbeReport {
    pub fn new(sample_index: usize, ts: DateTime<Utc>, checks: ProbeChecks) -> Self {
        Self { sample_index, ts, checks, pass: checks.all() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision")]
pub enum ProbeDecision {
    Committed { at_sample: usize },
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeWindow {
    pub decision: ProbeDecision,
    pub samples: Vec<ProbeReport>,
}

/// Index of the first sample that completes `required` consecutive passes.
pub fn commit_index(passes: &[bool], required: usize) -> Option<usize> {
    let mut run = 0;
    for (i, &p) in passes.iter().enumerate() {
        run = if p { run + 1 } else { 0 };
        if run >= required.max(1) {
            return Some(i);
        }
    }
    None
}

/// Samples at t = 0, interval, 2*interval, ... for at most `samples` samples,
/// committing as soon as `required` consecutive passes are seen. `after` runs
/// after every sample (crash injection point); its error aborts the window.
pub fn run_probe_window(
    samples: usize,
    interval: Duration,
    required: usize,
    clock: &dyn Clock,
    mut probe: impl FnMut(usize) -> ProbeReport,
    mut after: impl FnMut(usize) -> Result<()>,
) -> Result<ProbeWindow> {
    let mut reports = Vec::with_capacity(samples);
    let mut run = 0;
    for i in 0..samples {
        let report = probe(i);
        run = if report.pass { run + 1 } else { 0 };
        tracing::debug!(sample = i, pass = report.pass, "probe sample");
        reports.push(report);
        after(i)?;
        if run >= required.max(1) {
            return Ok(ProbeWindow { decision: ProbeDecision::Committed { at_sample: i }, samples: reports });
        }
        if i + 1 < samples {
            clock.sleep(interval);
        }
    }
    Ok(ProbeWindow { decision: ProbeDecision::RolledBack, samples: reports })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub ts: DateTime<Utc>,
}

/// Heartbeat document `{ts}` inside the user-state volume.
#[derive(Debug, Clone)]
pub struct FileHeartbeat {
    path: PathBuf,
}

pub const HEARTBEAT_FILE: &str = "heartbeat.json";

impl FileHeartbeat {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &std::path::Path {
        &self.path
    }

    pub fn write(&self, ts: DateTime<Utc>) -> Result<()> {
        let bytes = serde_json::to_vec(&Heartbeat { ts })?;
        Ok(crate::store::write_atomic(&self.path, &bytes, |_| Ok(()))?)
    }

    pub fn read(&self) -> Option<DateTime<Utc>> {
        let bytes = std::fs::read(&self.path).ok()?;
        serde_json::from_slice::<Heartbeat>(&bytes).ok().map(|h| h.ts)
    }
}

/// The four health checks against a substrate container.
pub struct HealthChecker {
    runtime: Arc<dyn ContainerRuntime>,
    heartbeat: FileHeartbeat,
    probe_commands: [Vec<String>; 2],
    freshness: Duration,
    clock: Arc<dyn Clock>,
    exec_timeout: Duration,
}

pub fn default_probe_commands() -> [Vec<String>; 2] {
    [
        ["substrate", "status", "--gateway"].map(String::from).to_vec(),
        ["substrate", "status", "--channels"].map(String::from).to_vec(),
    ]
}

impl HealthChecker {
    pub fn new(
        runtime: Arc<dyn ContainerRuntime>,
        heartbeat: FileHeartbeat,
        probe_commands: [Vec<String>; 2],
        freshness: Duration,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self { runtime, heartbeat, probe_commands, freshness, clock, exec_timeout: Duration::from_secs(10) }
    }

    /// A heartbeat is fresh when it is at most `freshness` old and was written
    /// after the probed container started; an unreadable file is stale.
    pub fn heartbeat_fresh(&self, started_at: Option<DateTime<Utc>>) -> bool {
        let Some(ts) = self.heartbeat.read() else { return false };
        let age = self.clock.now() - ts;
        let fresh = age <= chrono::Duration::from_std(self.freshness).unwrap_or(chrono::Duration::MAX);
        fresh && started_at.is_none_or(|s| ts >= s)
    }

    pub fn probe(&self, container_id: &str, sample_index: usize) -> ProbeReport {
        let info = self.runtime.inspect(container_id).ok().flatten();
        let running = info.as_ref().is_some_and(|c| c.running);
        let exec_ok = |cmd: &[String]| {
            running
                && self
                    .runtime
                    .exec(container_id, cmd, None, self.exec_timeout)
                    .is_ok_and(|r| r.exit_code == 0 && !r.timed_out)
        };
        let checks = ProbeChecks {
            heartbeat_fresh: self.heartbeat_fresh(info.as_ref().map(|c| c.started_at)),
            container_running: running,
            cli_probe_a: exec_ok(&self.probe_commands[0]),
            cli_probe_b: exec_ok(&self.probe_commands[1]),
        };
        ProbeReport::new(sample_index, self.clock.now(), checks)
    }
}
