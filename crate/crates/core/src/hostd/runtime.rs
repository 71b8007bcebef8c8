//! Container runtime abstraction with a simulated in-process implementation
//! and a docker CLI adapter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Error, Result};

pub const LIVE_NETWORK: &str = "moss-live";
pub const ISOLATED_NETWORK: &str = "none";
pub const STATE_MOUNT_TARGET: &str = "/state";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerRole {
    Substrate,
    Trial,
}

impl ContainerRole {
    fn as_str(self) -> &'static str {
        match self {
            ContainerRole::Substrate => "substrate",
            ContainerRole::Trial => "trial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mount {
    pub source: PathBuf,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub name: String,
    pub image_id: String,
    pub role: ContainerRole,
    pub mounts: Vec<Mount>,
    pub network: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerInfo {
    pub id: String,
    pub name: String,
    pub image_id: String,
    pub role: ContainerRole,
    pub running: bool,
    pub mounts: Vec<Mount>,
    pub network: String,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResult {
    pub exit_code: i32,
    pub stdout: String,
    pub timed_out: bool,
}

pub trait ContainerRuntime: Send + Sync {
    fn start(&self, spec: &ContainerSpec) -> Result<ContainerInfo>;
    /// Stops and removes; a no-op for unknown containers.
    fn stop(&self, id: &str) -> Result<()>;
    fn inspect(&self, id: &str) -> Result<Option<ContainerInfo>>;
    fn list(&self) -> Result<Vec<ContainerInfo>>;
    fn exec(&self, id: &str, cmd: &[String], stdin: Option<&str>, timeout: Duration) -> Result<ExecResult>;
}

/// Behaviour of a simulated substrate image, read from `behavior.json` at the
/// root of the image's tree.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubstrateBehavior {
    #[serde(default)]
    pub tasks: BTreeMap<String, TaskBehavior>,
    #[serde(default)]
    pub default_response: Option<String>,
    #[serde(default)]
    pub health: HealthBehavior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBehavior {
    pub response: String,
    #[serde(default)]
    pub outcome: SimOutcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimOutcome {
    #[default]
    Completed,
    Errored,
    TimedOut,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HealthBehavior {
    /// Exit codes by space-joined command; unlisted commands exit 0.
    #[serde(default)]
    pub exit_codes: BTreeMap<String, i32>,
    /// The container exits immediately after start.
    #[serde(default)]
    pub crash_on_start: bool,
}

pub const BEHAVIOR_FILE: &str = "behavior.json";
pub const AGENT_COMMAND: &str = "moss-agent";

struct SimInner {
    containers: BTreeMap<String, ContainerInfo>,
    next: u64,
    overrides: BTreeMap<String, SubstrateBehavior>,
}

/// In-process container runtime. Images are directories under `image_root`
/// (one per image id, as exported by the simulated builder). Cloning shares
/// state, so a restarted daemon sees the same containers.
#[derive(Clone)]
pub struct SimRuntime {
    image_root: PathBuf,
    clock: Arc<dyn Clock>,
    inner: Arc<Mutex<SimInner>>,
}

impl SimRuntime {
    pub fn new(image_root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Self {
        Self {
            image_root: image_root.into(),
            clock,
            inner: Arc::new(Mutex::new(SimInner {
                containers: BTreeMap::new(),
                next: 0,
                overrides: BTreeMap::new(),
            })),
        }
    }

    /// Replaces the behaviour an image would read from its own tree.
    pub fn override_behavior(&self, image_id: &str, behavior: SubstrateBehavior) {
        self.inner.lock().unwrap().overrides.insert(image_id.to_string(), behavior);
    }

    fn image_dir(&self, image_id: &str) -> Result<PathBuf> {
        let dir = self.image_root.join(crate::store::component(image_id)?);
        Ok(dir)
    }

    fn behavior(&self, image_id: &str) -> Result<SubstrateBehavior> {
        if let Some(b) = self.inner.lock().unwrap().overrides.get(image_id) {
            return Ok(b.clone());
        }
        read_behavior(&self.image_dir(image_id)?)
    }
}

pub fn read_behavior(image_dir: &Path) -> Result<SubstrateBehavior> {
    match std::fs::read(image_dir.join(BEHAVIOR_FILE)) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(SubstrateBehavior::default()),
        Err(e) => Err(e.into()),
    }
}

impl ContainerRuntime for SimRuntime {
    fn start(&self, spec: &ContainerSpec) -> Result<ContainerInfo> {
        let has_override = self.inner.lock().unwrap().overrides.contains_key(&spec.image_id);
        if !has_override && !self.image_dir(&spec.image_id)?.is_dir() {
            return Err(Error::RuntimeFailure(format!("image {} not found", spec.image_id)));
        }
        let behavior = self.behavior(&spec.image_id)?;
        let mut inner = self.inner.lock().unwrap();
        if inner.containers.values().any(|c| c.name == spec.name) {
            return Err(Error::RuntimeFailure(format!("container name {} in use", spec.name)));
        }
        inner.next += 1;
        let info = ContainerInfo {
            id: format!("sim-{:06}", inner.next),
            name: spec.name.clone(),
            image_id: spec.image_id.clone(),
            role: spec.role,
            running: !behavior.health.crash_on_start,
            mounts: spec.mounts.clone(),
            network: spec.network.clone(),
            started_at: self.clock.now(),
        };
        inner.containers.insert(info.id.clone(), info.clone());
        Ok(info)
    }

    fn stop(&self, id: &str) -> Result<()> {
        self.inner.lock().unwrap().containers.remove(id);
        Ok(())
    }

    fn inspect(&self, id: &str) -> Result<Option<ContainerInfo>> {
        Ok(self.inner.lock().unwrap().containers.get(id).cloned())
    }

    fn list(&self) -> Result<Vec<ContainerInfo>> {
        Ok(self.inner.lock().unwrap().containers.values().cloned().collect())
    }

    fn exec(&self, id: &str, cmd: &[String], _stdin: Option<&str>, _timeout: Duration) -> Result<ExecResult> {
        let info = self
            .inspect(id)?
            .filter(|c| c.running)
            .ok_or_else(|| Error::RuntimeFailure(format!("container {id} is not running")))?;
        let behavior = self.behavior(&info.image_id)?;
        if cmd.first().map(String::as_str) == Some(AGENT_COMMAND) && cmd.get(1).map(String::as_str) == Some("run") {
            let task_id = cmd.get(2).cloned().unwrap_or_default();
            let (response, outcome) = match behavior.tasks.get(&task_id) {
                Some(t) => (t.response.clone(), t.outcome),
                None => (
                    behavior.default_response.clone().unwrap_or_else(|| "I could not complete this task.".into()),
                    SimOutcome::Completed,
                ),
            };
            return Ok(match outcome {
                SimOutcome::Completed => ExecResult { exit_code: 0, stdout: response, timed_out: false },
                SimOutcome::Errored => ExecResult { exit_code: 1, stdout: response, timed_out: false },
                SimOutcome::TimedOut => ExecResult { exit_code: -1, stdout: String::new(), timed_out: true },
            });
        }
        let key = cmd.join(" ");
        let exit_code = behavior.health.exit_codes.get(&key).copied().unwrap_or(0);
        Ok(ExecResult { exit_code, stdout: String::new(), timed_out: false })
    }
}

/// Shells out to the docker CLI. Containers carry `moss.role` labels so
/// `list` only reports what this daemon manages.
#[derive(Debug, Clone)]
pub struct DockerRuntime {
    binary: String,
}

impl Default for DockerRuntime {
    fn default() -> Self {
        Self { binary: "docker".into() }
    }
}

impl DockerRuntime {
    pub fn new(binary: impl Into<String>) -> Self {
        Self { binary: binary.into() }
    }

    fn run(&self, args: &[String]) -> Result<String> {
        let out = Command::new(&self.binary)
            .args(args)
            .output()
            .map_err(|e| Error::RuntimeFailure(format!("{}: {e}", self.binary)))?;
        if !out.status.success() {
            return Err(Error::RuntimeFailure(format!(
                "{} {}: {}",
                self.binary,
                args.first().map(String::as_str).unwrap_or(""),
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }
}

#[derive(Deserialize)]
struct DockerInspect {
    #[serde(rename = "Id")]
    id: String,
    #[serde(rename = "Name")]
    name: String,
    #[serde(rename = "State")]
    state: DockerState,
    #[serde(rename = "Config")]
    config: DockerConfig,
    #[serde(rename = "Mounts", default)]
    mounts: Vec<DockerMount>,
    #[serde(rename = "HostConfig")]
    host_config: DockerHostConfig,
}

#[derive(Deserialize)]
struct DockerState {
    #[serde(rename = "Running")]
    running: bool,
    #[serde(rename = "StartedAt")]
    started_at: DateTime<Utc>,
}

#[derive(Deserialize)]
struct DockerConfig {
    #[serde(rename = "Labels", default)]
    labels: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct DockerMount {
    #[serde(rename = "Source")]
    source: PathBuf,
    #[serde(rename = "Destination")]
    destination: String,
}

#[derive(Deserialize)]
struct DockerHostConfig {
    #[serde(rename = "NetworkMode")]
    network_mode: String,
}

impl ContainerRuntime for DockerRuntime {
    fn start(&self, spec: &ContainerSpec) -> Result<ContainerInfo> {
        let mut args: Vec<String> = vec![
            "run".into(),
            "-d".into(),
            "--name".into(),
            spec.name.clone(),
            "--label".into(),
            format!("moss.role={}", spec.role.as_str()),
            "--label".into(),
            format!("moss.image={}", spec.image_id),
            "--network".into(),
            spec.network.clone(),
        ];
        for m in &spec.mounts {
            args.push("-v".into());
            args.push(format!("{}:{}", m.source.display(), m.target));
        }
        args.push(spec.image_id.clone());
        let id = self.run(&args)?;
        self.inspect(&id)?
            .ok_or_else(|| Error::RuntimeFailure(format!("container {id} vanished after start")))
    }

    fn stop(&self, id: &str) -> Result<()> {
        match self.run(&["rm".into(), "-f".into(), id.into()]) {
            Ok(_) => Ok(()),
            Err(Error::RuntimeFailure(msg)) if msg.contains("No such container") => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn inspect(&self, id: &str) -> Result<Option<ContainerInfo>> {
        let raw = match self.run(&["inspect".into(), id.into()]) {
            Ok(raw) => raw,
            Err(Error::RuntimeFailure(msg)) if msg.contains("No such") => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut parsed: Vec<DockerInspect> = serde_json::from_str(&raw)?;
        let Some(c) = parsed.pop() else { return Ok(None) };
        let role = match c.config.labels.get("moss.role").map(String::as_str) {
            Some("trial") => ContainerRole::Trial,
            _ => ContainerRole::Substrate,
        };
        Ok(Some(ContainerInfo {
            id: c.id,
            name: c.name.trim_start_matches('/').to_string(),
            image_id: c.config.labels.get("moss.image").cloned().unwrap_or_default(),
            role,
            running: c.state.running,
            mounts: c
                .mounts
                .into_iter()
                .map(|m| Mount { source: m.source, target: m.destination })
                .collect(),
            network: c.host_config.network_mode,
            started_at: c.state.started_at,
        }))
    }

    fn list(&self) -> Result<Vec<ContainerInfo>> {
        let ids = self.run(&[
            "ps".into(),
            "-aq".into(),
            "--filter".into(),
            "label=moss.role".into(),
        ])?;
        let mut out = Vec::new();
        for id in ids.lines().filter(|l| !l.is_empty()) {
            if let Some(info) = self.inspect(id)? {
                out.push(info);
            }
        }
        Ok(out)
    }

    fn exec(&self, id: &str, cmd: &[String], stdin: Option<&str>, timeout: Duration) -> Result<ExecResult> {
        let mut child = Command::new(&self.binary)
            .arg("exec")
            .arg("-i")
            .arg(id)
            .args(cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::RuntimeFailure(format!("{}: {e}", self.binary)))?;
        if let Some(mut pipe) = child.stdin.take() {
            use std::io::Write;
            let _ = pipe.write_all(stdin.unwrap_or("").as_bytes());
        }
        let stdout = child.stdout.take();
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            if let Some(mut out) = stdout {
                use std::io::Read;
                let _ = out.read_to_string(&mut s);
            }
            s
        });
        let started = std::time::Instant::now();
        loop {
            if let Some(status) = child.try_wait()? {
                let stdout = reader.join().unwrap_or_default();
                return Ok(ExecResult { exit_code: status.code().unwrap_or(-1), stdout, timed_out: false });
            }
            if started.elapsed() >= timeout {
                let _ = child.kill();
                let _ = child.wait();
                let stdout = reader.join().unwrap_or_default();
                return Ok(ExecResult { exit_code: -1, stdout, timed_out: true });
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}
