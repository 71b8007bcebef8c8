//! The evolution service: baseline, bounded iteration loop over the seven
//! stages, verdict validation with the plateau guard, and lifecycle controls.

mod gates;
mod prompts;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use gates::{parse_gate, parse_matrix, parse_verdict, peak_iteration, plateau_guard, Decision, GateDecision};
pub use prompts::render as render_prompt;

use crate::autoscan::load_batches;
use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::hostd::images::ImageBuilder;
use crate::hostd::swap::SwapRequest;
use crate::ids::new_id;
use crate::model::{
    doc_version, matrix_delta, Batch, BatchState, DepthName, DepthProfile, EvolutionRun, IterationRecord,
    KeypointMatrix, RunPhase, StageName, VerdictKind,
};
use crate::par::Parallelism;
use crate::runners::{invoke, RunnerRegistry, RunnerSpec, DEFAULT_TIMEOUT};
use crate::store::{write_atomic, StateKey, StateStore};
use crate::trials::{batch_tasks, run_trials, TrialBackend, TrialPlan, DEFAULT_TRIAL_TIMEOUT};
use crate::webhook::{fire, WebhookEvent, WebhookPayload, WebhookSink};
use crate::workspace::Workspace;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub stage_timeout: Duration,
    pub trial_timeout: Duration,
    /// Per-spawn provider override applied to every stage.
    pub provider_override: Option<String>,
    pub parallelism: Parallelism,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stage_timeout: DEFAULT_TIMEOUT,
            trial_timeout: DEFAULT_TRIAL_TIMEOUT,
            provider_override: None,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunControl {
    pub stop_requested: bool,
    pub requested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSummary {
    pub iteration: u32,
    pub kind: VerdictKind,
    pub forced_by_plateau: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub run_id: String,
    pub batch_id: String,
    pub phase: RunPhase,
    pub depth: DepthName,
    pub iteration: u32,
    pub current_stage: Option<String>,
    pub tasks: usize,
    pub keypoints: usize,
    pub baseline_score: Option<u32>,
    pub latest_score: Option<u32>,
    pub verdicts: Vec<VerdictSummary>,
    pub peak_iteration: Option<u32>,
    pub candidate_image: Option<String>,
    pub failure: Option<String>,
}

impl StatusReport {
    pub fn of(run: &EvolutionRun) -> Self {
        let latest = run.iterations.iter().rev().find_map(|it| it.matrix.as_ref());
        let baseline = run.baseline_matrix.as_ref();
        Self {
            run_id: run.run_id.clone(),
            batch_id: run.batch_id.clone(),
            phase: run.phase,
            depth: run.depth.name,
            iteration: run.iterations.len() as u32,
            current_stage: run.current_stage.clone(),
            tasks: baseline.map(|m| m.tasks.len()).unwrap_or(0),
            keypoints: baseline.map(|m| m.key_set().len()).unwrap_or(0),
            baseline_score: baseline.map(KeypointMatrix::score_sum),
            latest_score: latest.map(KeypointMatrix::score_sum),
            verdicts: run
                .iterations
                .iter()
                .filter_map(|it| {
                    it.verdict.as_ref().map(|v| VerdictSummary {
                        iteration: it.index,
                        kind: v.kind,
                        forced_by_plateau: v.forced_by_plateau,
                    })
                })
                .collect(),
            peak_iteration: run.peak_iteration,
            candidate_image: run.candidate_image.as_ref().map(|i| i.image_id.clone()),
            failure: run.failure.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch_id: String,
    pub conversation_id: String,
    pub state: BatchState,
    pub chunks: usize,
    pub seal_threshold: usize,
    pub created_at: DateTime<Utc>,
    pub sealed_at: Option<DateTime<Utc>>,
}

impl BatchSummary {
    pub fn of(b: &Batch) -> Self {
        Self {
            batch_id: b.batch_id.clone(),
            conversation_id: b.conversation_id.clone(),
            state: b.state,
            chunks: b.chunks.len(),
            seal_threshold: b.seal_threshold,
            created_at: b.created_at,
            sealed_at: b.sealed_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct NotifyMarker {
    event: WebhookEvent,
    delivered: bool,
}

const NOTIFY_FILE: &str = "notified.json";

pub struct EvolutionService {
    store: StateStore,
    runners: Arc<RunnerRegistry>,
    workspace: Arc<dyn Workspace>,
    builder: Arc<dyn ImageBuilder>,
    trials: Arc<dyn TrialBackend>,
    sink: Arc<dyn WebhookSink>,
    clock: Arc<dyn Clock>,
    config: PipelineConfig,
    lifecycle: Mutex<()>,
    driving: Mutex<HashSet<String>>,
    crash_before: Mutex<Option<(u32, StageName)>>,
    invocations: Mutex<BTreeMap<(String, u32), u32>>,
}

struct DriveGuard<'a> {
    set: &'a Mutex<HashSet<String>>,
    run_id: String,
}

impl Drop for DriveGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().unwrap().remove(&self.run_id);
    }
}

/// Which iteration a stage invocation belongs to, for artifacts and counting.
#[derive(Clone, Copy)]
struct At<'a> {
    run_id: &'a str,
    iteration: u32,
}

impl EvolutionService {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: StateStore,
        runners: Arc<RunnerRegistry>,
        workspace: Arc<dyn Workspace>,
        builder: Arc<dyn ImageBuilder>,
        trials: Arc<dyn TrialBackend>,
        sink: Arc<dyn WebhookSink>,
        clock: Arc<dyn Clock>,
        config: PipelineConfig,
    ) -> Self {
        Self {
            store,
            runners,
            workspace,
            builder,
            trials,
            sink,
            clock,
            config,
            lifecycle: Mutex::new(()),
            driving: Mutex::default(),
            crash_before: Mutex::new(None),
            invocations: Mutex::default(),
        }
    }

    pub fn store(&self) -> &StateStore {
        &self.store
    }

    pub fn workspace(&self) -> &Arc<dyn Workspace> {
        &self.workspace
    }

    /// Arms a one-shot simulated crash just before `stage` of `iteration`
    /// (iteration 0 is the baseline).
    pub fn crash_before(&self, iteration: u32, stage: StageName) {
        *self.crash_before.lock().unwrap() = Some((iteration, stage));
    }

    /// Runner invocations made by this process for one iteration.
    pub fn invocation_count(&self, run_id: &str, iteration: u32) -> u32 {
        self.invocations
            .lock()
            .unwrap()
            .get(&(run_id.to_string(), iteration))
            .copied()
            .unwrap_or(0)
    }

    // ---- persisted state -------------------------------------------------

    pub fn load_run(&self, run_id: &str) -> Result<EvolutionRun> {
        self.store
            .read_json(&StateKey::RunState { run_id: run_id.to_string() })?
            .ok_or_else(|| Error::UnknownRun(run_id.to_string()))
    }

    fn save_run(&self, run: &mut EvolutionRun) -> Result<()> {
        run.updated_at = self.clock.now();
        run.check()?;
        self.store.write_json(&StateKey::RunState { run_id: run.run_id.clone() }, run)
    }

    pub fn runs(&self) -> Result<Vec<EvolutionRun>> {
        let mut out = Vec::new();
        for id in self.store.run_ids()? {
            if let Some(r) = self.store.read_json::<EvolutionRun>(&StateKey::RunState { run_id: id })? {
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn active_run(&self) -> Result<Option<EvolutionRun>> {
        Ok(self.runs()?.into_iter().find(|r| r.phase.is_active()))
    }

    pub fn all_batches(&self) -> Result<Vec<Batch>> {
        let mut out = Vec::new();
        for conv in self.store.conversations()? {
            out.extend(load_batches(&self.store, &conv)?);
        }
        out.sort_by(|a, b| (a.created_at, &a.batch_id).cmp(&(b.created_at, &b.batch_id)));
        Ok(out)
    }

    pub fn batches(&self) -> Result<Vec<BatchSummary>> {
        Ok(self.all_batches()?.iter().map(BatchSummary::of).collect())
    }

    pub fn batch(&self, batch_id: &str) -> Result<Batch> {
        self.all_batches()?
            .into_iter()
            .find(|b| b.batch_id == batch_id)
            .ok_or_else(|| Error::UnknownBatch(batch_id.to_string()))
    }

    fn save_batch(&self, b: &Batch) -> Result<()> {
        b.check()?;
        self.store.write_json(
            &StateKey::Batch { conversation_id: b.conversation_id.clone(), batch_id: b.batch_id.clone() },
            b,
        )
    }

    fn move_batch(&self, batch_id: &str, from: &[BatchState], to: BatchState) -> Result<()> {
        let mut b = self.batch(batch_id)?;
        if from.contains(&b.state) {
            b.transition(to, self.clock.now())?;
            self.save_batch(&b)?;
        }
        Ok(())
    }

    fn control(&self, run_id: &str) -> Result<Option<RunControl>> {
        self.store.read_json(&StateKey::RunControl { run_id: run_id.to_string() })
    }

    // ---- lifecycle -------------------------------------------------------

    /// Selects (and seals, if open) a batch, moves it to evolving and creates
    /// the run in the baseline phase. Does not execute anything.
    pub fn start_run(&self, batch_selector: Option<&str>, depth: DepthProfile) -> Result<String> {
        depth.check()?;
        let _g = self.lifecycle.lock().unwrap();
        if let Some(active) = self.active_run()? {
            return Err(Error::RunAlreadyActive(active.run_id));
        }
        let now = self.clock.now();
        let mut batch = match batch_selector {
            Some(id) => {
                let b = self.batch(id)?;
                if b.chunks.is_empty() || !matches!(b.state, BatchState::Open | BatchState::Sealed) {
                    return Err(Error::NoEligibleBatch);
                }
                b
            }
            None => self
                .all_batches()?
                .into_iter()
                .filter(|b| !b.chunks.is_empty() && matches!(b.state, BatchState::Open | BatchState::Sealed))
                .max_by(|a, b| (a.created_at, &a.batch_id).cmp(&(b.created_at, &b.batch_id)))
                .ok_or(Error::NoEligibleBatch)?,
        };
        if batch.state == BatchState::Open {
            batch.transition(BatchState::Sealed, now)?;
        }
        batch.transition(BatchState::Evolving, now)?;
        self.save_batch(&batch)?;
        let mut run = EvolutionRun {
            version: doc_version(),
            run_id: new_id("run"),
            batch_id: batch.batch_id.clone(),
            conversation_id: batch.conversation_id.clone(),
            depth,
            phase: RunPhase::Baseline,
            baseline_matrix: None,
            iterations: Vec::new(),
            candidate_image: None,
            peak_iteration: None,
            current_stage: None,
            start_rev: self.workspace.current_rev()?,
            restarted_from: None,
            failure: None,
            created_at: now,
            updated_at: now,
        };
        self.save_run(&mut run)?;
        tracing::info!(run = %run.run_id, batch = %run.batch_id, depth = %run.depth.name, "run started");
        Ok(run.run_id)
    }

    /// Requests a cooperative stop. When nothing is driving the run the stop
    /// is applied immediately.
    pub fn stop(&self, run_id: &str) -> Result<EvolutionRun> {
        let run = self.load_run(run_id)?;
        if !run.phase.is_active() {
            return Err(Error::RunNotActive(run_id.to_string()));
        }
        let ctl = RunControl { stop_requested: true, requested_at: self.clock.now() };
        self.store.write_json(&StateKey::RunControl { run_id: run_id.to_string() }, &ctl)?;
        if !self.driving.lock().unwrap().contains(run_id) {
            self.finish_stopped(run_id)?;
        }
        self.load_run(run_id)
    }

    /// Fresh run on the same batch: same depth, baseline reused, workspace
    /// reset to where the original run started.
    pub fn restart(&self, run_id: &str) -> Result<String> {
        let _g = self.lifecycle.lock().unwrap();
        let old = self.load_run(run_id)?;
        if old.phase.is_active() {
            return Err(Error::RunActive(run_id.to_string()));
        }
        if old.phase == RunPhase::Converged {
            return Err(Error::InvalidTransition { from: "converged".into(), to: "restart".into() });
        }
        if let Some(active) = self.active_run()? {
            return Err(Error::RunAlreadyActive(active.run_id));
        }
        self.move_batch(&old.batch_id, &[BatchState::Sealed, BatchState::Failed], BatchState::Evolving)?;
        self.workspace.reset_hard(&old.start_rev)?;
        let now = self.clock.now();
        let mut run = EvolutionRun {
            version: doc_version(),
            run_id: new_id("run"),
            batch_id: old.batch_id.clone(),
            conversation_id: old.conversation_id.clone(),
            depth: old.depth.clone(),
            phase: if old.baseline_matrix.is_some() { RunPhase::Iterating } else { RunPhase::Baseline },
            baseline_matrix: old.baseline_matrix.clone(),
            iterations: Vec::new(),
            candidate_image: None,
            peak_iteration: None,
            current_stage: None,
            start_rev: old.start_rev.clone(),
            restarted_from: Some(old.run_id.clone()),
            failure: None,
            created_at: now,
            updated_at: now,
        };
        if let Some(m) = &run.baseline_matrix {
            self.store.write_json(&StateKey::BaselineMatrix { run_id: run.run_id.clone() }, m)?;
        }
        self.save_run(&mut run)?;
        tracing::info!(run = %run.run_id, from = %old.run_id, "run restarted");
        Ok(run.run_id)
    }

    pub fn status(&self, run_id: Option<&str>) -> Result<StatusReport> {
        let run = match run_id {
            Some(id) => self.load_run(id)?,
            None => self
                .runs()?
                .into_iter()
                .max_by(|a, b| (a.created_at, &a.run_id).cmp(&(b.created_at, &b.run_id)))
                .ok_or_else(|| Error::UnknownRun("(no runs)".into()))?,
        };
        Ok(StatusReport::of(&run))
    }

    /// Writes the swap request for a ready batch; the daemon performs the swap.
    pub fn apply(&self, batch_id: Option<&str>) -> Result<SwapRequest> {
        let ready: Vec<Batch> = self
            .all_batches()?
            .into_iter()
            .filter(|b| b.state == BatchState::ReadyToApply)
            .collect();
        let batch = match batch_id {
            Some(id) => {
                let b = self.batch(id)?;
                if b.state != BatchState::ReadyToApply {
                    return Err(Error::NothingToApply);
                }
                b
            }
            None => match ready.len() {
                0 => return Err(Error::NothingToApply),
                1 => ready.into_iter().next().unwrap(),
                _ => return Err(Error::AmbiguousApply(ready.into_iter().map(|b| b.batch_id).collect())),
            },
        };
        let run = self
            .runs()?
            .into_iter()
            .filter(|r| r.batch_id == batch.batch_id && r.phase == RunPhase::Converged)
            .max_by(|a, b| a.created_at.cmp(&b.created_at))
            .ok_or(Error::NothingToApply)?;
        let candidate = run
            .candidate_image
            .clone()
            .ok_or_else(|| Error::Invariant("converged run has no candidate image".into()))?;
        let request = SwapRequest {
            request_id: new_id("swap"),
            candidate_image: candidate,
            batch_id: batch.batch_id.clone(),
            run_id: run.run_id.clone(),
            requested_at: self.clock.now(),
        };
        self.store.write_json(&StateKey::SwapRequest, &request)?;
        tracing::info!(request = %request.request_id, image = %request.candidate_image.image_id, "swap requested");
        Ok(request)
    }

    /// Startup: re-sends notifications lost to a crash and returns the ids of
    /// runs that should be driven again.
    pub fn recover(&self) -> Result<Vec<String>> {
        let mut resume = Vec::new();
        for run in self.runs()? {
            if run.phase.is_active() {
                resume.push(run.run_id.clone());
            } else if matches!(
                run.phase,
                RunPhase::Converged | RunPhase::Failed | RunPhase::FailedModelLimit | RunPhase::FailedArchitectureLimit
            ) {
                self.notify_terminal(&run)?;
            }
        }
        Ok(resume)
    }

    // ---- driving ---------------------------------------------------------

    /// Executes the run until it reaches a terminal phase.
    pub fn drive(&self, run_id: &str) -> Result<EvolutionRun> {
        {
            let mut d = self.driving.lock().unwrap();
            if !d.insert(run_id.to_string()) {
                return Err(Error::RunAlreadyActive(run_id.to_string()));
            }
        }
        let _guard = DriveGuard { set: &self.driving, run_id: run_id.to_string() };
        loop {
            let run = self.load_run(run_id)?;
            if !run.phase.is_active() {
                return Ok(run);
            }
            match self.step(run) {
                Ok(()) => {}
                Err(Error::StopRequested) => self.finish_stopped(run_id)?,
                Err(e @ Error::SimulatedCrash(_)) => return Err(e),
                Err(e) => {
                    tracing::warn!(run = %run_id, error = %e, "run failed");
                    self.finish_failed(run_id, RunPhase::Failed, e.to_string())?;
                }
            }
        }
    }

    fn step(&self, mut run: EvolutionRun) -> Result<()> {
        if self.control(&run.run_id)?.is_some_and(|c| c.stop_requested) {
            return Err(Error::StopRequested);
        }
        match run.phase {
            RunPhase::Baseline => self.run_baseline(&mut run),
            RunPhase::Iterating => match run.iterations.last() {
                Some(last) if last.verdict.is_none() => self.discard_partial(&mut run),
                Some(last) if self.is_concluding(&run, last) => self.conclude(&mut run),
                _ => {
                    let k = run.iterations.len() as u32 + 1;
                    self.run_iteration(&mut run, k)
                }
            },
            _ => Ok(()),
        }
    }

    fn is_concluding(&self, run: &EvolutionRun, last: &IterationRecord) -> bool {
        match last.verdict.as_ref().map(|v| v.kind) {
            Some(VerdictKind::NeedMoreWork) => last.index >= run.depth.max_iterations,
            Some(_) => true,
            None => false,
        }
    }

    /// Crash recovery: drop the half-finished iteration and rewind the
    /// workspace to where it started.
    fn discard_partial(&self, run: &mut EvolutionRun) -> Result<()> {
        let Some(last) = run.iterations.pop() else { return Ok(()) };
        tracing::warn!(run = %run.run_id, iteration = last.index, "discarding interrupted iteration");
        self.workspace.reset_hard(&last.base_rev)?;
        let dir = self.store.iter_dir(&run.run_id, last.index)?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        run.current_stage = None;
        self.save_run(run)
    }

    fn boundary(&self, run: &mut EvolutionRun, iteration: u32, stage: StageName) -> Result<()> {
        {
            let mut armed = self.crash_before.lock().unwrap();
            if *armed == Some((iteration, stage)) {
                *armed = None;
                return Err(Error::SimulatedCrash(format!("before {stage} of iteration {iteration}")));
            }
        }
        if self.control(&run.run_id)?.is_some_and(|c| c.stop_requested) {
            return Err(Error::StopRequested);
        }
        run.current_stage = Some(stage.as_str().to_string());
        self.save_run(run)
    }

    fn invoke_stage<T>(
        &self,
        at: At<'_>,
        stage: StageName,
        round: u32,
        inputs: Vec<PathBuf>,
        parse: impl Fn(&[u8]) -> Result<T>,
    ) -> Result<(T, Vec<u8>)> {
        let runner = self.runners.get_for_stage(stage, self.config.provider_override.as_deref())?;
        let spec = RunnerSpec {
            provider_name: runner.provider_name().to_string(),
            stage,
            iteration: at.iteration,
            round,
            workspace_scope: self.workspace.root().to_path_buf(),
            prompt: prompts::render(stage, at.iteration, round),
            inputs,
            timeout: self.config.stage_timeout,
            env_allowlist: Vec::new(),
        };
        let mut last = None;
        for attempt in 1..=2 {
            *self
                .invocations
                .lock()
                .unwrap()
                .entry((at.run_id.to_string(), at.iteration))
                .or_default() += 1;
            let result = invoke(runner.as_ref(), &spec).and_then(|out| {
                if out.exit_status != 0 {
                    return Err(Error::invalid_output(stage, format!("exit status {}", out.exit_status)));
                }
                let parsed = parse(&out.body)?;
                Ok((parsed, out.body))
            });
            match result {
                Ok(v) => return Ok(v),
                Err(e @ Error::SimulatedCrash(_)) => return Err(e),
                Err(e) => {
                    tracing::warn!(%stage, attempt, error = %e, "stage invocation failed");
                    last = Some(e);
                }
            }
        }
        Err(match last {
            Some(e @ Error::StageOutputInvalid { .. }) => e,
            Some(e) => Error::invalid_output(stage, e.to_string()),
            None => Error::invalid_output(stage, "no attempt made"),
        })
    }

    fn artifact(&self, at: At<'_>, name: &str, body: &[u8]) -> Result<PathBuf> {
        let key = StateKey::IterArtifact { run_id: at.run_id.to_string(), iteration: at.iteration, name: name.into() };
        self.store.write(&key, body)?;
        self.store.path(&key)
    }

    fn relative(&self, path: &std::path::Path) -> String {
        path.strip_prefix(self.store.root()).unwrap_or(path).to_string_lossy().into_owned()
    }

    fn run_baseline(&self, run: &mut EvolutionRun) -> Result<()> {
        self.boundary(run, 0, StageName::TaskEvaluate)?;
        let batch = self.batch(&run.batch_id)?;
        let tasks: Vec<String> = batch_tasks(&batch).into_iter().map(|t| t.task_id).collect();
        let evidence = self.store.run_dir(&run.run_id)?.join("baseline").join("evidence.json");
        write_atomic(&evidence, &evidence_document(&batch)?, |_| Ok(()))?;
        let at = At { run_id: &run.run_id, iteration: 0 };
        let (matrix, _) =
            self.invoke_stage(at, StageName::TaskEvaluate, 1, vec![evidence], |b| parse_matrix(b, &tasks, None))?;
        self.store.write_json(&StateKey::BaselineMatrix { run_id: run.run_id.clone() }, &matrix)?;
        run.baseline_matrix = Some(matrix);
        run.phase = RunPhase::Iterating;
        run.current_stage = None;
        self.save_run(run)
    }

    fn run_iteration(&self, run: &mut EvolutionRun, k: u32) -> Result<()> {
        let baseline = run
            .baseline_matrix
            .clone()
            .ok_or_else(|| Error::Invariant("iterating without a baseline".into()))?;
        let batch = self.batch(&run.batch_id)?;
        let run_id = run.run_id.clone();
        let at = At { run_id: &run_id, iteration: k };
        let run_dir = self.store.run_dir(&run_id)?;
        let evidence = run_dir.join("baseline").join("evidence.json");
        if !evidence.exists() {
            write_atomic(&evidence, &evidence_document(&batch)?, |_| Ok(()))?;
        }
        let baseline_path = self.store.path(&StateKey::BaselineMatrix { run_id: run_id.clone() })?;
        run.iterations.push(IterationRecord { index: k, base_rev: self.workspace.current_rev()?, ..Default::default() });
        self.save_run(run)?;

        // locate
        self.boundary(run, k, StageName::Locate)?;
        let mut inputs = vec![evidence.clone(), baseline_path.clone()];
        if k > 1 {
            let prev = self.store.iter_dir(&run_id, k - 1)?;
            inputs.extend([prev.join("matrix.json"), prev.join("verdict.json")]);
        }
        let (_, body) = self.invoke_stage(at, StageName::Locate, 1, inputs, markdown(StageName::Locate))?;
        let locate = self.artifact(at, "locate.md", &body)?;
        self.record_artifact(run, StageName::Locate, &locate)?;

        // plan loop
        let mut review_feedback: Option<PathBuf> = None;
        let mut approved_plan = None;
        for round in 1..=run.depth.plan_rounds {
            self.boundary(run, k, StageName::Plan)?;
            let mut inputs = vec![locate.clone()];
            inputs.extend(review_feedback.clone());
            let (_, plan_body) = self.invoke_stage(at, StageName::Plan, round, inputs, markdown(StageName::Plan))?;
            let plan_path = self.artifact(at, &format!("plan-r{round}.md"), &plan_body)?;

            self.boundary(run, k, StageName::PlanReview)?;
            let (gate, review_body) = self.invoke_stage(
                at,
                StageName::PlanReview,
                round,
                vec![locate.clone(), plan_path.clone()],
                |b| parse_gate(StageName::PlanReview, b),
            )?;
            let review_path = self.artifact(at, &format!("plan_review-r{round}.json"), &review_body)?;
            self.last_iteration(run).plan_rounds_used = round;
            self.save_run(run)?;
            if gate.approved() {
                let plan = self.artifact(at, "plan.md", &plan_body)?;
                let review = self.artifact(at, "plan_review.json", &review_body)?;
                self.record_artifact(run, StageName::Plan, &plan)?;
                self.record_artifact(run, StageName::PlanReview, &review)?;
                approved_plan = Some(plan);
                break;
            }
            tracing::info!(round, decision = ?gate.decision, "plan rejected");
            review_feedback = Some(review_path);
        }
        let plan = approved_plan
            .ok_or(Error::BudgetExhausted { stage: StageName::PlanReview, rounds: run.depth.plan_rounds })?;

        // implement / code-review loop
        let r0 = self.workspace.current_rev()?;
        let mut feedback: Option<PathBuf> = None;
        let mut commit = None;
        for round in 1..=run.depth.code_rounds {
            self.boundary(run, k, StageName::Implement)?;
            let mut inputs = vec![plan.clone()];
            inputs.extend(feedback.clone());
            let (_, impl_body) =
                self.invoke_stage(at, StageName::Implement, round, inputs, markdown(StageName::Implement))?;
            let impl_path = self.artifact(at, &format!("implement-r{round}.md"), &impl_body)?;
            self.workspace.reset_soft(&r0)?;
            let head = self.workspace.commit(&format!("moss: iteration {k} round {round}"))?;
            self.last_iteration(run).code_rounds_used = round;
            self.save_run(run)?;
            let Some(head) = head else {
                tracing::warn!(round, error = %Error::ImplementNoCommit, "treating as rejection");
                feedback = Some(impl_path);
                continue;
            };
            let diff = self.workspace.diff(&r0, &head)?;
            let diff_path = self.artifact(at, &format!("diff-r{round}.patch"), diff.as_bytes())?;

            self.boundary(run, k, StageName::CodeReview)?;
            let (gate, review_body) = self.invoke_stage(
                at,
                StageName::CodeReview,
                round,
                vec![plan.clone(), diff_path.clone()],
                |b| parse_gate(StageName::CodeReview, b),
            )?;
            let review_path = self.artifact(at, &format!("code_review-r{round}.json"), &review_body)?;
            if gate.approved() {
                let d = self.artifact(at, "diff.patch", diff.as_bytes())?;
                let r = self.artifact(at, "code_review.json", &review_body)?;
                self.record_artifact(run, StageName::Implement, &d)?;
                self.record_artifact(run, StageName::CodeReview, &r)?;
                commit = Some(head);
                break;
            }
            tracing::info!(round, "code rejected; resetting to loop start");
            self.workspace.reset_hard(&r0)?;
            feedback = Some(review_path);
        }
        let Some(commit) = commit else {
            self.workspace.reset_hard(&r0)?;
            return Err(Error::BudgetExhausted { stage: StageName::CodeReview, rounds: run.depth.code_rounds });
        };
        self.last_iteration(run).commit_rev = Some(commit.clone());
        self.save_run(run)?;

        // build + trials
        let image = self.builder.build(&commit)?;
        self.last_iteration(run).image = Some(image.clone());
        self.save_run(run)?;
        let plan_doc = TrialPlan {
            image,
            tasks: batch_tasks(&batch),
            trials_per_task: run.depth.trials_per_task,
            workers_n: run.depth.trial_workers_n,
            timeout: self.config.trial_timeout,
        };
        let store = &self.store;
        let transcripts = run_trials(self.trials.as_ref(), &plan_doc, self.config.parallelism, &|t| {
            let key = StateKey::Trial {
                run_id: run_id.clone(),
                iteration: k,
                task_id: t.task_id.clone(),
                trial: t.trial_index,
            };
            store.write(&key, &t.to_jsonl()?)
        })?;
        tracing::info!(iteration = k, transcripts = transcripts.len(), "trials finished");

        // task evaluate
        self.boundary(run, k, StageName::TaskEvaluate)?;
        let mut inputs = vec![baseline_path.clone()];
        for t in &transcripts {
            inputs.push(self.store.path(&StateKey::Trial {
                run_id: run_id.clone(),
                iteration: k,
                task_id: t.task_id.clone(),
                trial: t.trial_index,
            })?);
        }
        let tasks = baseline.task_ids();
        let (matrix, body) = self.invoke_stage(at, StageName::TaskEvaluate, 1, inputs, |b| {
            parse_matrix(b, &tasks, Some(&baseline))
        })?;
        let matrix_path = self.artifact(at, "matrix.json", &body)?;
        self.record_artifact(run, StageName::TaskEvaluate, &matrix_path)?;
        let previous = run
            .iterations
            .iter()
            .rev()
            .skip(1)
            .find_map(|it| it.matrix.clone())
            .unwrap_or_else(|| baseline.clone());
        let delta = matrix_delta(&previous, &matrix)?;
        let delta_path = self.artifact(at, "delta.json", &pretty(&delta)?)?;
        {
            let it = self.last_iteration(run);
            it.matrix = Some(matrix);
            it.delta = Some(delta);
        }
        self.save_run(run)?;

        // verdict
        self.boundary(run, k, StageName::Verdict)?;
        let (raw, _) = self.invoke_stage(
            at,
            StageName::Verdict,
            1,
            vec![baseline_path, matrix_path, delta_path],
            parse_verdict,
        )?;
        let (verdict, peak) = plateau_guard(raw, &run.iterations, run.depth.plateau_window);
        verdict.check()?;
        let verdict_path = self.artifact(at, "verdict.json", &pretty(&verdict)?)?;
        self.record_artifact(run, StageName::Verdict, &verdict_path)?;
        tracing::info!(iteration = k, kind = verdict.kind.as_str(), forced = verdict.forced_by_plateau, "verdict");
        if let Some(p) = peak {
            run.peak_iteration = Some(p);
        }
        self.last_iteration(run).verdict = Some(verdict);
        run.current_stage = None;
        self.save_run(run)?;
        let last = run.iterations.last().cloned().unwrap_or_default();
        if self.is_concluding(run, &last) {
            self.conclude(run)?;
        }
        Ok(())
    }

    fn last_iteration<'a>(&self, run: &'a mut EvolutionRun) -> &'a mut IterationRecord {
        run.iterations.last_mut().expect("iteration in progress")
    }

    fn record_artifact(&self, run: &mut EvolutionRun, stage: StageName, path: &std::path::Path) -> Result<()> {
        let rel = self.relative(path);
        self.last_iteration(run).stage_artifacts.insert(stage.as_str().to_string(), rel);
        self.save_run(run)
    }

    /// Applies the terminal outcome of the last iteration's verdict.
    fn conclude(&self, run: &mut EvolutionRun) -> Result<()> {
        let last = run.iterations.last().cloned().ok_or_else(|| Error::Invariant("nothing to conclude".into()))?;
        let verdict = last.verdict.clone().ok_or_else(|| Error::Invariant("iteration has no verdict".into()))?;
        match verdict.kind {
            VerdictKind::Converged => {
                let source = match run.peak_iteration {
                    Some(p) if verdict.forced_by_plateau => p,
                    _ => last.index,
                };
                let image = run
                    .iterations
                    .iter()
                    .find(|it| it.index == source)
                    .and_then(|it| it.image.clone())
                    .ok_or_else(|| Error::Invariant(format!("iteration {source} has no image")))?;
                self.move_batch(&run.batch_id, &[BatchState::Evolving], BatchState::ReadyToApply)?;
                run.candidate_image = Some(image);
                run.phase = RunPhase::Converged;
                run.current_stage = None;
                self.save_run(run)?;
                self.notify_terminal(run)
            }
            VerdictKind::FundamentalLimitModel => {
                self.finish_failed(&run.run_id, RunPhase::FailedModelLimit, verdict.rationale)
            }
            VerdictKind::FundamentalLimitArchitecture => {
                self.finish_failed(&run.run_id, RunPhase::FailedArchitectureLimit, verdict.rationale)
            }
            VerdictKind::NeedMoreWork => self.finish_failed(
                &run.run_id,
                RunPhase::Failed,
                format!("no convergence within {} iterations", run.depth.max_iterations),
            ),
        }
    }

    fn finish_failed(&self, run_id: &str, phase: RunPhase, reason: String) -> Result<()> {
        let mut run = self.load_run(run_id)?;
        if !run.phase.is_active() {
            return Ok(());
        }
        self.move_batch(&run.batch_id, &[BatchState::Evolving], BatchState::Failed)?;
        run.phase = phase;
        run.failure = Some(reason);
        run.current_stage = None;
        self.save_run(&mut run)?;
        self.notify_terminal(&run)
    }

    fn finish_stopped(&self, run_id: &str) -> Result<()> {
        let mut run = self.load_run(run_id)?;
        if !run.phase.is_active() {
            return Ok(());
        }
        if let Some(last) = run.iterations.last().filter(|it| it.verdict.is_none()) {
            self.workspace.reset_hard(&last.base_rev)?;
        }
        self.move_batch(&run.batch_id, &[BatchState::Evolving], BatchState::Sealed)?;
        run.phase = RunPhase::Stopped;
        run.current_stage = None;
        self.save_run(&mut run)?;
        self.store.remove(&StateKey::RunControl { run_id: run_id.to_string() })?;
        tracing::info!(run = %run_id, "run stopped");
        Ok(())
    }

    fn notify_terminal(&self, run: &EvolutionRun) -> Result<()> {
        let marker_path = self.store.run_dir(&run.run_id)?.join(NOTIFY_FILE);
        if marker_path.exists() {
            return Ok(());
        }
        let (event, detail) = match run.phase {
            RunPhase::Converged => (
                WebhookEvent::EvolutionConverged,
                run.iterations
                    .last()
                    .and_then(|it| it.verdict.as_ref())
                    .map(|v| v.rationale.clone())
                    .unwrap_or_default(),
            ),
            _ => (WebhookEvent::EvolutionFailed, run.failure.clone().unwrap_or_default()),
        };
        let payload = WebhookPayload {
            event,
            run_id: run.run_id.clone(),
            batch_id: run.batch_id.clone(),
            status: run.phase.as_str().to_string(),
            detail,
            ts: self.clock.now(),
            delivery_id: format!("{}-{}", event.as_str(), run.run_id),
        };
        let delivered = fire(self.sink.as_ref(), &payload);
        write_atomic(&marker_path, &pretty(&NotifyMarker { event, delivered })?, |_| Ok(()))?;
        Ok(())
    }
}

fn markdown(stage: StageName) -> impl Fn(&[u8]) -> Result<()> {
    move |b: &[u8]| {
        let text = std::str::from_utf8(b).map_err(|_| Error::invalid_output(stage, "body is not UTF-8"))?;
        if text.trim().is_empty() {
            return Err(Error::invalid_output(stage, "empty body"));
        }
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

#[derive(Serialize)]
struct EvidenceTask<'a> {
    task_id: String,
    prompt: String,
    chunks: Vec<&'a crate::model::ChunkRecord>,
}

/// The batch grouped by task, as handed to Locate and the baseline evaluation.
fn evidence_document(batch: &Batch) -> Result<Vec<u8>> {
    let tasks = batch_tasks(batch);
    let mut docs: Vec<EvidenceTask<'_>> = tasks
        .iter()
        .map(|t| EvidenceTask { task_id: t.task_id.clone(), prompt: t.prompt.clone(), chunks: Vec::new() })
        .collect();
    for chunk in &batch.chunks {
        let Some(first) = chunk.transcript.iter().find(|e| e.role == crate::model::Role::User) else {
            continue;
        };
        let id = crate::trials::task_id_for(&first.content);
        if let Some(d) = docs.iter_mut().find(|d| d.task_id == id) {
            d.chunks.push(chunk);
        }
    }
    pretty(&docs)
}
