//! Host-resident supervisor: RPC front end over the runner, trial, image and
//! autoscan families, plus the swap supervisor's poll loop.

pub mod config;
pub mod images;
pub mod probe;
pub mod rpc;
pub mod runtime;
pub mod swap;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::autoscan::AutoScan;
use crate::error::{Error, Result};
use crate::model::ImageRef;
use crate::runners::{InvocationPlan, RunnerHandle, RunnerRegistry, RunnerSpec};
use crate::store::{StateKey, StateStore};
use crate::traffic::TrafficLog;
use crate::trials::{sweep_workers, TrialBackend, TrialTask};

use images::{ImageBuilder, ImageRegistry, LastKnownGood};
use rpc::{params, ExecResultDoc, RpcHandler, RpcServer, SpawnResult};
use runtime::ContainerRuntime;
use swap::SwapSupervisor;

pub struct HostDaemon {
    store: StateStore,
    autoscan: Arc<AutoScan>,
    runners: Arc<RunnerRegistry>,
    trials: Arc<dyn TrialBackend>,
    builder: Arc<dyn ImageBuilder>,
    runtime: Arc<dyn ContainerRuntime>,
    swap: Arc<SwapSupervisor>,
    /// Swaps take this exclusively; runner, trial and image work share it.
    gate: Arc<RwLock<()>>,
    invocations: Mutex<HashMap<String, String>>,
}

#[derive(Deserialize)]
struct SpecParams {
    spec: RunnerSpec,
    #[serde(default)]
    provider_override: Option<String>,
}

#[derive(Deserialize)]
struct PlanParams {
    plan: InvocationPlan,
}

#[derive(Deserialize)]
struct HandleParams {
    handle: RunnerHandle,
}

#[derive(Deserialize)]
struct WorkerParams {
    worker_id: String,
}

#[derive(Deserialize)]
struct SpawnParams {
    image_id: String,
}

#[derive(Deserialize)]
struct ExecParams {
    worker_id: String,
    task: TrialTask,
    #[serde(default = "one")]
    trial_index: u32,
    #[serde(default)]
    timeout_ms: Option<u64>,
    #[serde(default)]
    run_id: Option<String>,
    #[serde(default)]
    iteration: Option<u32>,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
struct BuildParams {
    rev: String,
}

#[derive(Deserialize)]
struct TagParams {
    image_id: String,
    tag: String,
}

#[derive(Deserialize)]
struct FlagParams {
    session_id: String,
}

impl HostDaemon {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: StateStore,
        autoscan: Arc<AutoScan>,
        runners: Arc<RunnerRegistry>,
        trials: Arc<dyn TrialBackend>,
        builder: Arc<dyn ImageBuilder>,
        runtime: Arc<dyn ContainerRuntime>,
        swap: Arc<SwapSupervisor>,
        gate: Arc<RwLock<()>>,
    ) -> Self {
        Self {
            store,
            autoscan,
            runners,
            trials,
            builder,
            runtime,
            swap,
            gate,
            invocations: Mutex::default(),
        }
    }

    pub fn swap(&self) -> &Arc<SwapSupervisor> {
        &self.swap
    }

    pub fn store(&self) -> &StateStore {
        &self.store
    }

    /// Startup: remove leftover trial workers, finish any interrupted swap.
    pub fn recover(&self) -> Result<()> {
        let swept = sweep_workers(self.runtime.as_ref())?;
        if swept > 0 {
            tracing::warn!(swept, "removed leftover trial workers");
        }
        self.swap.recover()
    }

    /// First deployment when no last-known-good exists yet.
    pub fn bootstrap(&self, image: &ImageRef) -> Result<()> {
        if LastKnownGood::load(&self.store)?.is_none() {
            self.swap.deploy_initial(image)?;
        }
        Ok(())
    }

    fn shared<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let _g = self.gate.read().unwrap();
        f()
    }

    pub fn build_image(&self, rev: &str) -> Result<ImageRef> {
        let image = self.shared(|| self.builder.build(rev))?;
        let _g = self.gate.write().unwrap();
        let mut reg = ImageRegistry::load(&self.store)?;
        reg.record(&image);
        reg.save(&self.store)?;
        Ok(image)
    }

    fn runner_op(&self, op: &str, p: Value) -> Result<Value> {
        match op {
            "prepare" => {
                let SpecParams { spec, provider_override } = params(p)?;
                let runner = self.runners.get(&spec.provider_name, provider_override.as_deref())?;
                let plan = self.shared(|| runner.prepare(&spec))?;
                self.invocations
                    .lock()
                    .unwrap()
                    .insert(plan.invocation_id.clone(), runner.provider_name().to_string());
                Ok(serde_json::to_value(plan)?)
            }
            "launch" => {
                let PlanParams { plan } = params(p)?;
                let runner = self.runner_for(&plan.invocation_id)?;
                Ok(serde_json::to_value(self.shared(|| runner.launch(&plan))?)?)
            }
            "collect" => {
                let HandleParams { handle } = params(p)?;
                let runner = self.runner_for(&handle.invocation_id)?;
                Ok(serde_json::to_value(self.shared(|| runner.collect(&handle))?)?)
            }
            "cancel" => {
                let HandleParams { handle } = params(p)?;
                let runner = self.runner_for(&handle.invocation_id)?;
                runner.cancel(&handle)?;
                Ok(json!({}))
            }
            _ => Err(Error::UnknownOp(format!("runner.{op}"))),
        }
    }

    fn runner_for(&self, invocation_id: &str) -> Result<Arc<dyn crate::runners::Runner>> {
        let name = self
            .invocations
            .lock()
            .unwrap()
            .get(invocation_id)
            .cloned()
            .ok_or_else(|| Error::UnknownInvocation(invocation_id.to_string()))?;
        self.runners.get(&name, None)
    }

    fn trial_op(&self, op: &str, p: Value) -> Result<Value> {
        match op {
            "spawn" => {
                let SpawnParams { image_id } = params(p)?;
                let worker_id = self.shared(|| self.trials.spawn(&image_id))?;
                Ok(serde_json::to_value(SpawnResult { worker_id })?)
            }
            "isolation" => {
                let WorkerParams { worker_id } = params(p)?;
                Ok(serde_json::to_value(self.trials.isolation(&worker_id)?)?)
            }
            "exec" => {
                let e: ExecParams = params(p)?;
                let timeout = e.timeout_ms.map(Duration::from_millis).unwrap_or(crate::trials::DEFAULT_TRIAL_TIMEOUT);
                let transcript = self.shared(|| self.trials.exec(&e.worker_id, &e.task, e.trial_index, timeout))?;
                let path = match (e.run_id, e.iteration) {
                    (Some(run_id), Some(iteration)) => {
                        let key = StateKey::Trial {
                            run_id,
                            iteration,
                            task_id: transcript.task_id.clone(),
                            trial: transcript.trial_index,
                        };
                        self.store.write(&key, &transcript.to_jsonl()?)?;
                        Some(self.store.path(&key)?)
                    }
                    _ => None,
                };
                Ok(serde_json::to_value(ExecResultDoc { transcript, path })?)
            }
            "teardown" => {
                let WorkerParams { worker_id } = params(p)?;
                self.trials.teardown(&worker_id)?;
                Ok(json!({}))
            }
            "list" => Ok(serde_json::to_value(self.trials.live_workers()?)?),
            _ => Err(Error::UnknownOp(format!("trial.{op}"))),
        }
    }

    fn image_op(&self, op: &str, p: Value) -> Result<Value> {
        match op {
            "build" => {
                let BuildParams { rev } = params(p)?;
                Ok(serde_json::to_value(self.build_image(&rev)?)?)
            }
            "tag" => {
                let TagParams { image_id, tag } = params(p)?;
                let _g = self.gate.write().unwrap();
                let mut reg = ImageRegistry::load(&self.store)?;
                reg.tag(&image_id, &tag)?;
                reg.save(&self.store)?;
                Ok(json!({}))
            }
            "lkg" => Ok(serde_json::to_value(LastKnownGood::load(&self.store)?)?),
            _ => Err(Error::UnknownOp(format!("image.{op}"))),
        }
    }

    fn autoscan_op(&self, op: &str, p: Value) -> Result<Value> {
        match op {
            "catch_up" => Ok(serde_json::to_value(self.autoscan.catch_up()?)?),
            "flag" => {
                let FlagParams { session_id } = params(p)?;
                Ok(serde_json::to_value(self.autoscan.flag(&session_id)?)?)
            }
            _ => Err(Error::UnknownOp(format!("autoscan.{op}"))),
        }
    }

    /// Serves RPC on `socket` and polls for swap requests until shutdown.
    pub fn start(self: &Arc<Self>, socket: impl Into<PathBuf>, traffic: Option<TrafficLog>) -> Result<DaemonHandle> {
        let server = RpcServer::bind(socket, self.clone(), traffic)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let swap = self.swap.clone();
        let poller = std::thread::Builder::new().name("moss-swap-poll".into()).spawn(move || {
            let interval = swap.poll_interval();
            while !flag.load(Ordering::SeqCst) {
                match swap.tick() {
                    Ok(Some(outcome)) => tracing::info!(?outcome, "swap completed"),
                    Ok(None) => {}
                    Err(Error::SwapHalted(reason)) => tracing::debug!(%reason, "swap supervisor halted"),
                    Err(Error::SimulatedCrash(at)) => {
                        // Behave like a killed process: stop polling, leave state as is.
                        tracing::error!(%at, "simulated crash; swap poller exiting");
                        break;
                    }
                    Err(e) => tracing::error!(error = %e, "swap tick failed"),
                }
                sleep_unless(&flag, interval);
            }
        })?;
        Ok(DaemonHandle { server: Some(server), stop, poller: Some(poller) })
    }
}

fn sleep_unless(flag: &AtomicBool, d: Duration) {
    let step = Duration::from_millis(10);
    let mut left = d;
    while !left.is_zero() && !flag.load(Ordering::SeqCst) {
        let s = left.min(step);
        std::thread::sleep(s);
        left -= s;
    }
}

impl RpcHandler for HostDaemon {
    fn handle(&self, op: &str, params: Value) -> Result<Value> {
        let (family, name) = op.split_once('.').ok_or_else(|| Error::UnknownOp(op.to_string()))?;
        match family {
            "runner" => self.runner_op(name, params),
            "trial" => self.trial_op(name, params),
            "image" => self.image_op(name, params),
            "autoscan" => self.autoscan_op(name, params),
            _ => Err(Error::UnknownOp(op.to_string())),
        }
    }
}

pub struct DaemonHandle {
    server: Option<RpcServer>,
    stop: Arc<AtomicBool>,
    poller: Option<JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.server.take() {
            s.shutdown();
        }
        if let Some(p) = self.poller.take() {
            let _ = p.join();
        }
    }

    /// Blocks until the poll loop exits.
    pub fn wait(mut self) {
        if let Some(p) = self.poller.take() {
            let _ = p.join();
        }
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// In-process builds still go through the daemon so the registry learns
/// about every candidate.
impl ImageBuilder for HostDaemon {
    fn build(&self, rev: &str) -> Result<ImageRef> {
        self.build_image(rev)
    }
}
