use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use super::gateway::{Gateway, GatewayConfig};
use super::scenario::{generate_sessions, Scenario};
use super::HookMapping;
use crate::autoscan::{AutoScan, AutoScanConfig, ScriptedEvaluator};
use crate::clock::{Clock, SystemClock, Timing};
use crate::error::{Error, Result};
use crate::hostd::images::{ImageBuilder, LastKnownGood, SimBuilder};
use crate::hostd::probe::{default_probe_commands, FileHeartbeat, HealthChecker, HEARTBEAT_FILE};
use crate::hostd::rpc::{RpcClient, RpcImageBuilder, RpcRunner, RpcTrialBackend};
use crate::hostd::runtime::{ContainerRuntime, SimRuntime};
use crate::hostd::swap::SwapSupervisor;
use crate::hostd::{DaemonHandle, HostDaemon};
use crate::model::DEFAULT_SEAL_THRESHOLD;
use crate::par::Parallelism;
use crate::pipeline::{EvolutionService, PipelineConfig};
use crate::runners::{Runner, RunnerRegistry, ScriptEntry, ScriptedRunner};
use crate::store::StateStore;
use crate::traffic::TrafficLog;
use crate::trials::{RuntimeTrialBackend, TrialBackend};
use crate::webhook::HttpWebhookSink;
use crate::workspace::{GitWorkspace, Workspace};

pub struct StackOptions {
    pub scenario: String,
    pub script: Vec<ScriptEntry>,
    pub timing: Timing,
    /// Pipeline reaches runners, trials and builds over the daemon socket
    /// instead of in-process.
    pub remote_backends: bool,
    pub parallelism: Parallelism,
    /// Working directory; a temporary one is created when absent.
    pub root: Option<PathBuf>,
    pub gateway_bind: String,
    /// Provider used for every stage; the scripted runner over `script` when absent.
    pub runner: Option<Arc<dyn Runner>>,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            scenario: "eight-weak-exchanges".into(),
            script: Vec::new(),
            timing: Timing::scaled(20.0),
            remote_backends: true,
            parallelism: Parallelism::default(),
            root: None,
            gateway_bind: "127.0.0.1:0".into(),
            runner: None,
        }
    }
}

/// Every component wired together on one machine: gateway, pipeline, host
/// daemon over a Unix socket, simulated container runtime and image builder.
pub struct Stack {
    pub root: PathBuf,
    pub store: StateStore,
    pub workspace: Arc<GitWorkspace>,
    pub runtime: SimRuntime,
    pub daemon: Arc<HostDaemon>,
    pub service: Arc<EvolutionService>,
    pub gateway: Gateway,
    pub traffic: TrafficLog,
    pub scenario: Scenario,
    pub socket: PathBuf,
    pub timing: Timing,
    parts: DaemonParts,
    handle: Option<DaemonHandle>,
    _tmp: Option<tempfile::TempDir>,
}

/// What a daemon restart rebuilds from: everything that would survive the
/// process (state directory, runtime, workspace) or is configuration.
struct DaemonParts {
    store: StateStore,
    autoscan: Arc<AutoScan>,
    runners: Arc<RunnerRegistry>,
    trials: Arc<dyn TrialBackend>,
    builder: Arc<dyn ImageBuilder>,
    runtime: Arc<dyn ContainerRuntime>,
    sink: Arc<HttpWebhookSink>,
    heartbeat: FileHeartbeat,
    volume: PathBuf,
    clock: Arc<dyn Clock>,
    timing: Timing,
}

impl DaemonParts {
    fn daemon(&self) -> Arc<HostDaemon> {
        let gate = Arc::new(RwLock::new(()));
        let checker = HealthChecker::new(
            self.runtime.clone(),
            self.heartbeat.clone(),
            default_probe_commands(),
            self.timing.real(self.timing.heartbeat_freshness),
            self.clock.clone(),
        );
        let swap = Arc::new(SwapSupervisor::new(
            self.store.clone(),
            self.runtime.clone(),
            checker,
            self.sink.clone(),
            self.clock.clone(),
            self.timing.clone(),
            &self.volume,
            gate.clone(),
        ));
        Arc::new(HostDaemon::new(
            self.store.clone(),
            self.autoscan.clone(),
            self.runners.clone(),
            self.trials.clone(),
            self.builder.clone(),
            self.runtime.clone(),
            swap,
            gate,
        ))
    }
}

fn initial_behavior(scenario: &Scenario) -> String {
    let tasks: serde_json::Map<String, serde_json::Value> = scenario
        .task_ids
        .iter()
        .map(|t| (t.clone(), serde_json::json!({ "response": format!("{t}: partial answer, data incomplete.") })))
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "tasks": tasks })).unwrap()
}

impl Stack {
    pub fn start(opts: StackOptions) -> Result<Self> {
        let (tmp, root) = match opts.root {
            Some(r) => (None, r),
            None => {
                let t = tempfile::Builder::new().prefix("moss").tempdir()?;
                let p = t.path().to_path_buf();
                (Some(t), p)
            }
        };
        let dirs = ["state", "workspace", "sessions", "images/blobs", "volume", "invocations"];
        for d in dirs {
            std::fs::create_dir_all(root.join(d))?;
        }
        let clock: Arc<dyn Clock> = Arc::new(SystemClock);
        let store = StateStore::open(root.join("state"))?;
        let scenario = generate_sessions(&opts.scenario, &root.join("sessions"))?;
        let ws_root = root.join("workspace");
        let workspace = Arc::new(if ws_root.join(".git").exists() {
            GitWorkspace::open(&ws_root)?
        } else {
            GitWorkspace::init(&ws_root, &[("behavior.json", &initial_behavior(&scenario)), ("README.md", "substrate\n")])?
        });
        let blobs = root.join("images/blobs");
        let runtime = SimRuntime::new(&blobs, clock.clone());
        let runtime_dyn: Arc<dyn ContainerRuntime> = Arc::new(runtime.clone());
        let volume = root.join("volume");
        let traffic = TrafficLog::default();

        let heartbeat = FileHeartbeat::new(volume.join(HEARTBEAT_FILE));
        let gateway = Gateway::bind(GatewayConfig {
            bind: opts.gateway_bind.clone(),
            hooks: HookMapping::default(),
            heartbeat: Some((heartbeat.clone(), opts.timing.real(opts.timing.heartbeat_refresh))),
            traffic: Some(traffic.clone()),
            clock: clock.clone(),
        })?;
        let sink = Arc::new(HttpWebhookSink::new(gateway.hook_url()).with_backoff(Duration::from_millis(20)));

        let evaluator = Arc::new(ScriptedEvaluator::new(scenario.evaluator.clone()));
        let autoscan = Arc::new(AutoScan::new(
            store.clone(),
            AutoScanConfig {
                session_dirs: vec![scenario.session_dir.clone()],
                seal_threshold: DEFAULT_SEAL_THRESHOLD,
                parallelism: opts.parallelism,
            },
            evaluator,
            clock.clone(),
        ));
        let runner = opts
            .runner
            .unwrap_or_else(|| Arc::new(ScriptedRunner::new(opts.script, root.join("invocations"))));
        let host_runners = Arc::new(RunnerRegistry::new(runner.provider_name()).with(runner));
        let host_trials: Arc<dyn TrialBackend> =
            Arc::new(RuntimeTrialBackend::new(runtime_dyn.clone(), clock.clone()).with_state_volume(&volume));
        let builder: Arc<dyn ImageBuilder> = Arc::new(SimBuilder::new(workspace.clone(), &blobs, clock.clone()));
        let parts = DaemonParts {
            store: store.clone(),
            autoscan,
            runners: host_runners.clone(),
            trials: host_trials.clone(),
            builder,
            runtime: runtime_dyn,
            sink: sink.clone(),
            heartbeat,
            volume,
            clock: clock.clone(),
            timing: opts.timing.clone(),
        };
        let daemon = parts.daemon();
        daemon.recover()?;
        let initial = daemon.build_image(&workspace.current_rev()?)?;
        daemon.bootstrap(&initial)?;
        let socket = root.join("hostd.sock");
        let _ = std::fs::remove_file(&socket);
        let handle = daemon.start(&socket, Some(traffic.clone()))?;

        let (runners, trials, images): (Arc<RunnerRegistry>, Arc<dyn TrialBackend>, Arc<dyn ImageBuilder>) =
            if opts.remote_backends {
                let client = || RpcClient::new(&socket).with_timeout(Duration::from_secs(120));
                let name = host_runners.default_provider().to_string();
                let remote: Arc<dyn Runner> = Arc::new(RpcRunner::new(name.clone(), client()));
                (
                    Arc::new(RunnerRegistry::new(name).with(remote)),
                    Arc::new(RpcTrialBackend::new(client())),
                    Arc::new(RpcImageBuilder::new(client())),
                )
            } else {
                (host_runners, host_trials, daemon.clone())
            };
        let service = Arc::new(EvolutionService::new(
            store.clone(),
            runners,
            workspace.clone(),
            images,
            trials,
            sink,
            clock,
            PipelineConfig { parallelism: opts.parallelism, ..PipelineConfig::default() },
        ));
        service.recover()?;
        gateway.attach(service.clone());
        Ok(Self {
            root,
            store,
            workspace,
            runtime,
            daemon,
            service,
            gateway,
            traffic,
            scenario,
            socket,
            timing: opts.timing,
            parts,
            handle: Some(handle),
            _tmp: tmp,
        })
    }

    pub fn gateway_url(&self) -> &str {
        self.gateway.url()
    }

    pub fn socket(&self) -> &Path {
        &self.socket
    }

    pub fn last_known_good(&self) -> Result<Option<LastKnownGood>> {
        LastKnownGood::load(&self.store)
    }

    /// Polls `f` until it yields a value or `timeout` passes.
    pub fn wait_for<T>(&self, timeout: Duration, mut f: impl FnMut() -> Result<Option<T>>) -> Result<T> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(v) = f()? {
                return Ok(v);
            }
            if Instant::now() >= deadline {
                return Err(Error::Timeout);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Replaces the daemon with a fresh instance over the same state, as a
    /// process restart would, and runs startup recovery before serving.
    pub fn restart_daemon(&mut self) -> Result<()> {
        if let Some(h) = self.handle.take() {
            h.shutdown();
        }
        let daemon = self.parts.daemon();
        daemon.recover()?;
        let _ = std::fs::remove_file(&self.socket);
        self.handle = Some(daemon.start(&self.socket, Some(self.traffic.clone()))?);
        self.daemon = daemon;
        Ok(())
    }

    pub fn shutdown(mut self) {
        self.gateway.wait_idle();
        if let Some(h) = self.handle.take() {
            h.shutdown();
        }
    }

    /// Blocks until the daemon's poll loop exits (never, unless it is shut down).
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            h.wait();
        }
    }
}
