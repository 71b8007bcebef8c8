use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::scripted::finish;
use super::{stage_invocation, HandleState, InvocationPlan, Runner, RunnerHandle, RunnerSpec, StageOutput};
use crate::error::{Error, Result};

/// Command template for a coding-agent CLI.
///
/// Arguments may contain `{prompt_path}`, `{workspace}` and `{output_path}`.
/// The process runs with the workspace as its working directory. Success is
/// exit 0 with a non-empty output file, falling back to captured stdout when
/// the CLI does not write one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubprocessConfig {
    pub command: Vec<String>,
    /// Feed prompt.md on stdin.
    #[serde(default)]
    pub stdin_prompt: bool,
    /// Variables passed through from the daemon's environment.
    #[serde(default = "default_allowlist")]
    pub env_allowlist: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

fn default_allowlist() -> Vec<String> {
    vec!["PATH".into(), "HOME".into()]
}

impl SubprocessConfig {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            stdin_prompt: false,
            env_allowlist: default_allowlist(),
            env: BTreeMap::new(),
        }
    }
}

pub const PRESET_NAMES: [&str; 4] = ["claude-code", "codex", "deepseek-tui", "opencode"];

/// Command templates for the coding-agent CLIs shipped as presets. They are
/// ordinary [`SubprocessConfig`]s and can be overridden from configuration.
pub fn preset(name: &str) -> Option<SubprocessConfig> {
    let (command, stdin_prompt, keys): (&[&str], bool, &[&str]) = match name {
        "claude-code" => (
            &["claude", "--print", "--permission-mode", "acceptEdits"],
            true,
            &["ANTHROPIC_API_KEY"],
        ),
        "codex" => (&["codex", "exec", "--full-auto", "-"], true, &["OPENAI_API_KEY"]),
        "deepseek-tui" => (
            &["deepseek-tui", "--non-interactive", "--prompt-file", "{prompt_path}"],
            false,
            &["DEEPSEEK_API_KEY"],
        ),
        "opencode" => (&["opencode", "run", "--file", "{prompt_path}"], false, &[]),
        _ => return None,
    };
    let mut cfg = SubprocessConfig::new(command.iter().map(|s| s.to_string()).collect());
    cfg.stdin_prompt = stdin_prompt;
    cfg.env_allowlist.extend(keys.iter().map(|k| k.to_string()));
    Some(cfg)
}

struct Invocation {
    plan: InvocationPlan,
    child: Option<Child>,
    pid: u32,
    started: Instant,
    state: HandleState,
}

pub struct SubprocessRunner {
    name: String,
    config: SubprocessConfig,
    invocations_root: PathBuf,
    inner: Mutex<HashMap<String, Invocation>>,
}

impl SubprocessRunner {
    pub fn new(name: impl Into<String>, config: SubprocessConfig, invocations_root: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            config,
            invocations_root: invocations_root.into(),
            inner: Mutex::new(HashMap::new()),
        }
    }

    pub fn pid(&self, invocation_id: &str) -> Option<u32> {
        self.inner.lock().unwrap().get(invocation_id).map(|i| i.pid)
    }

    fn render(&self, arg: &str, plan: &InvocationPlan) -> String {
        arg.replace("{prompt_path}", &plan.prompt_path().to_string_lossy())
            .replace("{workspace}", &plan.spec.workspace_scope.to_string_lossy())
            .replace("{output_path}", &plan.output_path().to_string_lossy())
    }
}

/// SIGKILL the whole process group and reap the leader.
fn kill_group(child: &mut Child) {
    let pgid = child.id() as i32;
    // SAFETY: plain syscall; a stale group yields ESRCH which we ignore.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
    let _ = child.wait();
}

impl Runner for SubprocessRunner {
    fn provider_name(&self) -> &str {
        &self.name
    }

    fn prepare(&self, spec: &RunnerSpec) -> Result<InvocationPlan> {
        stage_invocation(&self.invocations_root, spec)
    }

    fn launch(&self, plan: &InvocationPlan) -> Result<RunnerHandle> {
        let (program, args) = self
            .config
            .command
            .split_first()
            .ok_or_else(|| Error::LaunchFailure("empty command template".into()))?;
        let mut cmd = Command::new(self.render(program, plan));
        cmd.args(args.iter().map(|a| self.render(a, plan)))
            .current_dir(&plan.spec.workspace_scope)
            .env_clear()
            .stdout(File::create(plan.dir.join("stdout"))?)
            .stderr(File::create(plan.log_path())?)
            .process_group(0);
        for key in self.config.env_allowlist.iter().chain(&plan.spec.env_allowlist) {
            if let Ok(v) = std::env::var(key) {
                cmd.env(key, v);
            }
        }
        cmd.envs(&self.config.env)
            .env("MOSS_STAGE", plan.spec.stage.as_str())
            .env("MOSS_ROUND", plan.spec.round.to_string())
            .env("MOSS_ITERATION", plan.spec.iteration.to_string())
            .env("MOSS_INVOCATION_DIR", &plan.dir);
        if self.config.stdin_prompt {
            cmd.stdin(File::open(plan.prompt_path())?);
        } else {
            cmd.stdin(Stdio::null());
        }
        let child = cmd
            .spawn()
            .map_err(|e| Error::LaunchFailure(format!("{program}: {e}")))?;
        let pid = child.id();
        debug!(provider = %self.name, pid, invocation = %plan.invocation_id, "launched");
        self.inner.lock().unwrap().insert(
            plan.invocation_id.clone(),
            Invocation {
                plan: plan.clone(),
                child: Some(child),
                pid,
                started: Instant::now(),
                state: HandleState::Running,
            },
        );
        Ok(RunnerHandle {
            invocation_id: plan.invocation_id.clone(),
            provider_name: self.name.clone(),
            started_at: Utc::now(),
            state: HandleState::Running,
        })
    }

    fn collect(&self, handle: &RunnerHandle) -> Result<StageOutput> {
        loop {
            let mut inner = self.inner.lock().unwrap();
            let inv = inner
                .get_mut(&handle.invocation_id)
                .ok_or_else(|| Error::UnknownInvocation(handle.invocation_id.clone()))?;
            match inv.state {
                HandleState::Cancelled => return Err(Error::Cancelled),
                HandleState::TimedOut => return Err(Error::Timeout),
                HandleState::Finished => {
                    return Err(Error::LaunchFailure("invocation already collected".into()))
                }
                HandleState::Running => {}
            }
            let child = inv.child.as_mut().expect("running invocation owns its child");
            if let Some(status) = child.try_wait()? {
                // Reap anything the CLI left behind in its group.
                kill_group(child);
                inv.child = None;
                inv.state = HandleState::Finished;
                let plan = inv.plan.clone();
                drop(inner);
                let mut body = std::fs::read(plan.output_path()).unwrap_or_default();
                if body.is_empty() {
                    body = std::fs::read(plan.dir.join("stdout")).unwrap_or_default();
                }
                let exit = status.code().unwrap_or(-1);
                return finish(plan.spec.stage, body, exit, plan.log_path());
            }
            if inv.started.elapsed() >= inv.plan.spec.timeout {
                kill_group(child);
                inv.child = None;
                inv.state = HandleState::TimedOut;
                return Err(Error::Timeout);
            }
            drop(inner);
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    fn cancel(&self, handle: &RunnerHandle) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let Some(inv) = inner.get_mut(&handle.invocation_id) else {
            return Ok(());
        };
        if inv.state != HandleState::Running {
            return Ok(());
        }
        if let Some(mut child) = inv.child.take() {
            kill_group(&mut child);
        }
        inv.state = HandleState::Cancelled;
        let _ = std::fs::remove_file(inv.plan.output_path());
        Ok(())
    }

    fn state(&self, invocation_id: &str) -> Option<HandleState> {
        self.inner.lock().unwrap().get(invocation_id).map(|i| i.state)
    }
}

impl Drop for SubprocessRunner {
    fn drop(&mut self) {
        if let Ok(mut inner) = self.inner.lock() {
            for inv in inner.values_mut() {
                if let Some(mut child) = inv.child.take() {
                    kill_group(&mut child);
                }
            }
        }
    }
}
