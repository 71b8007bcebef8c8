//! Ephemeral trial workers: spawn isolated containers from a candidate image,
//! replay batch tasks several times each, record transcripts, tear down.

mod scoring;

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use scoring::{aggregate_scores, ScoreSummary};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::hostd::runtime::{
    ContainerRole, ContainerRuntime, ContainerSpec, Mount, AGENT_COMMAND, ISOLATED_NETWORK, LIVE_NETWORK,
    STATE_MOUNT_TARGET,
};
use crate::ids::new_id;
use crate::model::{Batch, ImageRef, Role, TranscriptEntry};
use crate::par::{self, Parallelism};

pub const DEFAULT_TRIAL_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialTask {
    pub task_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub image: ImageRef,
    pub tasks: Vec<TrialTask>,
    pub trials_per_task: u32,
    pub workers_n: u32,
    pub timeout: Duration,
}

impl TrialPlan {
    pub fn check(&self) -> Result<()> {
        if self.workers_n == 0 || self.trials_per_task == 0 {
            return Err(Error::BadRequest("workers_n and trials_per_task must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(Error::BadRequest("trial timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Completed,
    Errored,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialTranscript {
    pub task_id: String,
    /// 1-based.
    pub trial_index: u32,
    pub worker_id: String,
    pub entries: Vec<TranscriptEntry>,
    pub outcome: TrialOutcome,
}

#[derive(Serialize, Deserialize)]
struct TranscriptHeader {
    task_id: String,
    trial_index: u32,
    worker_id: String,
    outcome: TrialOutcome,
}

impl TrialTranscript {
    /// One header line, then one line per entry.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let header = TranscriptHeader {
            task_id: self.task_id.clone(),
            trial_index: self.trial_index,
            worker_id: self.worker_id.clone(),
            outcome: self.outcome,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for e in &self.entries {
            out.extend(serde_json::to_vec(e)?);
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::BadRequest(e.to_string()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: TranscriptHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::BadRequest("empty transcript".into()))?)?;
        let entries = lines.map(serde_json::from_str).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            task_id: header.task_id,
            trial_index: header.trial_index,
            worker_id: header.worker_id,
            entries,
            outcome: header.outcome,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub worker_id: String,
    pub isolated: bool,
    pub state_mounted: bool,
    pub shares_live_network: bool,
}

/// Where trials execute. The runtime-backed implementation lives in this
/// module; the daemon exposes the same calls over RPC.
pub trait TrialBackend: Send + Sync {
    fn spawn(&self, image_id: &str) -> Result<String>;
    fn isolation(&self, worker_id: &str) -> Result<IsolationReport>;
    fn exec(&self, worker_id: &str, task: &TrialTask, trial_index: u32, timeout: Duration) -> Result<TrialTranscript>;
    fn teardown(&self, worker_id: &str) -> Result<()>;
    fn live_workers(&self) -> Result<Vec<String>>;
}

/// Mount and network settings for spawned workers. The default is isolated;
/// tests can add mounts to exercise the violation path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub extra_mounts: Vec<Mount>,
    pub network: Option<String>,
}

pub struct RuntimeTrialBackend {
    runtime: Arc<dyn ContainerRuntime>,
    clock: Arc<dyn Clock>,
    state_volume: Option<std::path::PathBuf>,
    config: WorkerConfig,
}

impl RuntimeTrialBackend {
    pub fn new(runtime: Arc<dyn ContainerRuntime>, clock: Arc<dyn Clock>) -> Self {
        Self { runtime, clock, state_volume: None, config: WorkerConfig::default() }
    }

    /// The live user-state volume; used to detect leaks into worker mounts.
    pub fn with_state_volume(mut self, path: impl Into<std::path::PathBuf>) -> Self {
        self.state_volume = Some(path.into());
        self
    }

    pub fn with_config(mut self, config: WorkerConfig) -> Self {
        self.config = config;
        self
    }
}

impl TrialBackend for RuntimeTrialBackend {
    fn spawn(&self, image_id: &str) -> Result<String> {
        let spec = ContainerSpec {
            name: new_id("moss-trial"),
            image_id: image_id.to_string(),
            role: ContainerRole::Trial,
            mounts: self.config.extra_mounts.clone(),
            network: self.config.network.clone().unwrap_or_else(|| ISOLATED_NETWORK.into()),
        };
        let info = self.runtime.start(&spec).map_err(|e| Error::WorkerSpawnFailed(e.to_string()))?;
        if !info.running {
            let _ = self.runtime.stop(&info.id);
            return Err(Error::WorkerSpawnFailed(format!("worker {} exited on start", info.id)));
        }
        Ok(info.id)
    }

    fn isolation(&self, worker_id: &str) -> Result<IsolationReport> {
        let info = self
            .runtime
            .inspect(worker_id)?
            .ok_or_else(|| Error::RuntimeFailure(format!("worker {worker_id} not found")))?;
        let state_mounted = info.mounts.iter().any(|m| {
            m.target == STATE_MOUNT_TARGET || self.state_volume.as_ref().is_some_and(|v| &m.source == v)
        });
        let live_networks: Vec<String> = self
            .runtime
            .list()?
            .into_iter()
            .filter(|c| c.role == ContainerRole::Substrate)
            .map(|c| c.network)
            .chain([LIVE_NETWORK.to_string()])
            .collect();
        let shares_live_network = info.network != ISOLATED_NETWORK
            && (info.network == "host" || live_networks.contains(&info.network));
        Ok(IsolationReport {
            worker_id: worker_id.to_string(),
            isolated: !state_mounted && !shares_live_network,
            state_mounted,
            shares_live_network,
        })
    }

    fn exec(&self, worker_id: &str, task: &TrialTask, trial_index: u32, timeout: Duration) -> Result<TrialTranscript> {
        let mut entries = vec![TranscriptEntry {
            turn_index: 0,
            role: Role::User,
            content: task.prompt.clone(),
            ts: self.clock.now(),
        }];
        let cmd = [AGENT_COMMAND.to_string(), "run".into(), task.task_id.clone()];
        let outcome = match self.runtime.exec(worker_id, &cmd, Some(&task.prompt), timeout) {
            Ok(r) => {
                if !r.stdout.is_empty() {
                    entries.push(TranscriptEntry {
                        turn_index: 1,
                        role: Role::Agent,
                        content: r.stdout,
                        ts: self.clock.now(),
                    });
                }
                if r.timed_out {
                    TrialOutcome::TimedOut
                } else if r.exit_code == 0 {
                    TrialOutcome::Completed
                } else {
                    TrialOutcome::Errored
                }
            }
            Err(e) => {
                entries.push(TranscriptEntry {
                    turn_index: 1,
                    role: Role::System,
                    content: format!("trial execution failed: {e}"),
                    ts: self.clock.now(),
                });
                TrialOutcome::Errored
            }
        };
        Ok(TrialTranscript {
            task_id: task.task_id.clone(),
            trial_index,
            worker_id: worker_id.to_string(),
            entries,
            outcome,
        })
    }

    fn teardown(&self, worker_id: &str) -> Result<()> {
        self.runtime.stop(worker_id)
    }

    fn live_workers(&self) -> Result<Vec<String>> {
        Ok(self
            .runtime
            .list()?
            .into_iter()
            .filter(|c| c.role == ContainerRole::Trial)
            .map(|c| c.id)
            .collect())
    }
}

/// Removes every trial container; run on daemon start so a crash mid-trials
/// leaves nothing behind.
pub fn sweep_workers(runtime: &dyn ContainerRuntime) -> Result<usize> {
    let mut n = 0;
    for c in runtime.list()? {
        if c.role == ContainerRole::Trial {
            runtime.stop(&c.id)?;
            n += 1;
        }
    }
    Ok(n)
}

/// Schedules tasks x trials over `workers_n` workers through a shared queue.
/// Every (task, trial) produces one transcript; workers are torn down before
/// returning on every path. `persist` is called once per transcript.
pub fn run_trials(
    backend: &dyn TrialBackend,
    plan: &TrialPlan,
    mode: Parallelism,
    persist: &(dyn Fn(&TrialTranscript) -> Result<()> + Sync),
) -> Result<Vec<TrialTranscript>> {
    plan.check()?;
    let mut workers = Vec::new();
    let result = (|| {
        for _ in 0..plan.workers_n {
            workers.push(backend.spawn(&plan.image.image_id)?);
        }
        for w in &workers {
            let report = backend.isolation(w)?;
            if !report.isolated {
                let reason = if report.state_mounted {
                    "user-state volume is mounted"
                } else {
                    "worker shares the live network"
                };
                return Err(Error::IsolationViolation { worker: w.clone(), reason: reason.into() });
            }
        }
        execute(backend, plan, mode, &workers, persist)
    })();
    let mut teardown_err = None;
    for w in &workers {
        if let Err(e) = backend.teardown(w) {
            tracing::warn!(worker = %w, error = %e, "worker teardown failed");
            teardown_err.get_or_insert(e);
        }
    }
    let transcripts = result?;
    if let Some(e) = teardown_err {
        return Err(e);
    }
    Ok(transcripts)
}

fn execute(
    backend: &dyn TrialBackend,
    plan: &TrialPlan,
    mode: Parallelism,
    workers: &[String],
    persist: &(dyn Fn(&TrialTranscript) -> Result<()> + Sync),
) -> Result<Vec<TrialTranscript>> {
    let queue: Mutex<VecDeque<(usize, u32)>> = Mutex::new(
        (0..plan.tasks.len())
            .flat_map(|t| (1..=plan.trials_per_task).map(move |k| (t, k)))
            .collect(),
    );
    let done: Mutex<Vec<(usize, TrialTranscript)>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    par::run_workers(mode, workers.len(), |w| loop {
        if failure.lock().unwrap().is_some() {
            return;
        }
        let Some((t, k)) = queue.lock().unwrap().pop_front() else { return };
        let outcome = backend
            .exec(&workers[w], &plan.tasks[t], k, plan.timeout)
            .and_then(|tr| persist(&tr).map(|_| tr));
        match outcome {
            Ok(tr) => done.lock().unwrap().push((t, tr)),
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                return;
            }
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut done = done.into_inner().unwrap();
    done.sort_by_key(|(t, tr)| (*t, tr.trial_index));
    Ok(done.into_iter().map(|(_, tr)| tr).collect())
}

/// Task id from a prompt: a leading `ID:` token when present, otherwise a
/// short content hash.
pub fn task_id_for(prompt: &str) -> String {
    if let Some((head, _)) = prompt.split_once(':') {
        let head = head.trim();
        if !head.is_empty()
            && head.len() <= 32
            && head.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            && head.chars().any(|c| c.is_ascii_digit())
        {
            return head.to_string();
        }
    }
    format!("task-{}", &hex::encode(Sha256::digest(prompt.as_bytes()))[..8])
}

/// One task per distinct first-user-turn prompt, in order of first appearance.
pub fn batch_tasks(batch: &Batch) -> Vec<TrialTask> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for chunk in &batch.chunks {
        let Some(first) = chunk.transcript.iter().find(|e| e.role == Role::User) else {
            continue;
        };
        let task_id = task_id_for(&first.content);
        if seen.insert(task_id.clone(), ()).is_none() {
            out.push(TrialTask { task_id, prompt: first.content.clone() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::hostd::runtime::{SimOutcome, SimRuntime, SubstrateBehavior, TaskBehavior};

    fn backend(outcomes: &[(&str, SimOutcome)]) -> (RuntimeTrialBackend, SimRuntime, ImageRef) {
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::default());
        let rt = SimRuntime::new("/nonexistent", clock.clone());
        let behavior = SubstrateBehavior {
            tasks: outcomes
                .iter()
                .map(|(t, o)| (t.to_string(), TaskBehavior { response: format!("answer {t}"), outcome: *o }))
                .collect(),
            ..Default::default()
        };
        rt.override_behavior("img", behavior);
        let image = ImageRef { image_id: "img".into(), built_from_rev: "r".into(), built_at: clock.now() };
        (RuntimeTrialBackend::new(Arc::new(rt.clone()), clock), rt, image)
    }

    fn plan(image: ImageRef, tasks: &[&str], trials: u32, n: u32) -> TrialPlan {
        TrialPlan {
            image,
            tasks: tasks.iter().map(|t| TrialTask { task_id: t.to_string(), prompt: format!("{t}: do it") }).collect(),
            trials_per_task: trials,
            workers_n: n,
            timeout: DEFAULT_TRIAL_TIMEOUT,
        }
    }

    #[test]
    fn four_tasks_two_trials_two_workers() {
        let (b, rt, img) = backend(&[]);
        let out = run_trials(&b, &plan(img, &["a", "b", "c", "d"], 2, 2), Parallelism::Parallel, &|_| Ok(())).unwrap();
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|t| t.outcome == TrialOutcome::Completed));
        assert!(rt.list().unwrap().is_empty());
    }

    #[test]
    fn erroring_task_is_recorded() {
        let (b, _, img) = backend(&[("c", SimOutcome::Errored)]);
        let out = run_trials(&b, &plan(img, &["a", "b", "c", "d"], 2, 2), Parallelism::Sequential, &|_| Ok(())).unwrap();
        let errored: Vec<_> = out.iter().filter(|t| t.outcome == TrialOutcome::Errored).collect();
        assert_eq!(errored.len(), 2);
        assert!(errored.iter().all(|t| t.task_id == "c"));
    }

    #[test]
    fn state_mount_is_a_violation_and_workers_are_removed() {
        let (b, rt, img) = backend(&[]);
        let b = b.with_config(WorkerConfig {
            extra_mounts: vec![Mount { source: "/state-volume".into(), target: STATE_MOUNT_TARGET.into() }],
            network: None,
        });
        let err = run_trials(&b, &plan(img, &["a"], 1, 2), Parallelism::Sequential, &|_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::IsolationViolation { .. }));
        assert!(rt.list().unwrap().is_empty());
    }

    #[test]
    fn spawn_failure_reports_and_cleans_up() {
        let (b, rt, mut img) = backend(&[]);
        img.image_id = "missing".into();
        let err = run_trials(&b, &plan(img, &["a"], 1, 3), Parallelism::Sequential, &|_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::WorkerSpawnFailed(_)));
        assert!(rt.list().unwrap().is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let (b, _, img) = backend(&[]);
        let out = run_trials(&b, &plan(img, &["a"], 1, 1), Parallelism::Sequential, &|_| Ok(())).unwrap();
        let bytes = out[0].to_jsonl().unwrap();
        assert_eq!(TrialTranscript::from_jsonl(&bytes).unwrap(), out[0]);
    }

    #[test]
    fn task_ids_from_prompts() {
        assert_eq!(task_id_for("T141zh: summarise the thread"), "T141zh");
        assert_eq!(task_id_for("Note: no id here"), task_id_for("Note: no id here"));
        assert!(task_id_for("Note: no id here").starts_with("task-"));
    }
}
