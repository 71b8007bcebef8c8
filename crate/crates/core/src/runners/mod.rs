//! Pluggable coding-agent runners.
//!
//! A runner is driven through four calls: `prepare` stages the prompt and
//! inputs into an invocation directory, `launch` starts the provider,
//! `collect` blocks until it finishes (or times out), and `cancel` stops it.
//! Adding a provider means one new [`Runner`] implementation plus one
//! [`RunnerRegistry::register`] call.

mod registry;
mod scripted;
mod subprocess;

use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use registry::RunnerRegistry;
pub use scripted::{parse_script, ScriptEntry, ScriptedRunner};
pub use subprocess::{preset, SubprocessConfig, SubprocessRunner, PRESET_NAMES};

use crate::error::{Error, Result};
use crate::ids::new_id;
use crate::model::StageName;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(900);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerSpec {
    pub provider_name: String,
    pub stage: StageName,
    /// 1-based iteration; 0 for the pre-loop baseline and ad-hoc calls.
    pub iteration: u32,
    /// 1-based round inside the plan or code loop; 1 for single-shot stages.
    pub round: u32,
    pub workspace_scope: PathBuf,
    pub prompt: String,
    pub inputs: Vec<PathBuf>,
    pub timeout: Duration,
    pub env_allowlist: Vec<String>,
}

impl RunnerSpec {
    pub fn check(&self) -> Result<()> {
        if !self.workspace_scope.is_dir() {
            return Err(Error::LaunchFailure(format!(
                "workspace scope {} does not exist",
                self.workspace_scope.display()
            )));
        }
        if self.timeout.is_zero() {
            return Err(Error::LaunchFailure("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationPlan {
    pub invocation_id: String,
    pub dir: PathBuf,
    pub spec: RunnerSpec,
}

impl InvocationPlan {
    pub fn prompt_path(&self) -> PathBuf {
        self.dir.join("prompt.md")
    }

    pub fn output_path(&self) -> PathBuf {
        self.dir.join("output")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("log")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandleState {
    Running,
    Finished,
    Cancelled,
    TimedOut,
}

impl HandleState {
    pub fn is_terminal(self) -> bool {
        self != HandleState::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerHandle {
    pub invocation_id: String,
    pub provider_name: String,
    pub started_at: DateTime<Utc>,
    pub state: HandleState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub kind: StageName,
    #[serde(with = "body_text")]
    pub body: Vec<u8>,
    pub exit_status: i32,
    pub log_path: PathBuf,
}

mod body_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(body: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(body))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

pub trait Runner: Send + Sync {
    fn provider_name(&self) -> &str;
    fn prepare(&self, spec: &RunnerSpec) -> Result<InvocationPlan>;
    fn launch(&self, plan: &InvocationPlan) -> Result<RunnerHandle>;
    /// Blocks until the invocation finishes. At most one call per handle.
    fn collect(&self, handle: &RunnerHandle) -> Result<StageOutput>;
    /// Idempotent; a no-op on terminal handles.
    fn cancel(&self, handle: &RunnerHandle) -> Result<()>;
    fn state(&self, invocation_id: &str) -> Option<HandleState>;
}

/// prepare + launch + collect.
pub fn invoke(runner: &dyn Runner, spec: &RunnerSpec) -> Result<StageOutput> {
    let plan = runner.prepare(spec)?;
    let handle = runner.launch(&plan)?;
    runner.collect(&handle)
}

/// Shared `prepare`: writes `invocations/<id>/{prompt.md, inputs/}`.
pub fn stage_invocation(invocations_root: &Path, spec: &RunnerSpec) -> Result<InvocationPlan> {
    spec.check()?;
    let invocation_id = new_id("inv");
    let dir = invocations_root.join(&invocation_id);
    let inputs_dir = dir.join("inputs");
    std::fs::create_dir_all(&inputs_dir)?;
    std::fs::write(dir.join("prompt.md"), &spec.prompt)?;
    let mut manifest = Vec::new();
    for (i, input) in spec.inputs.iter().enumerate() {
        let name = input
            .file_name()
            .map(|n| format!("{i:02}-{}", n.to_string_lossy()))
            .unwrap_or_else(|| format!("{i:02}"));
        if input.is_file() {
            std::fs::copy(input, inputs_dir.join(&name))?;
        }
        manifest.push(serde_json::json!({ "name": name, "source": input }));
    }
    std::fs::write(
        inputs_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(InvocationPlan { invocation_id, dir, spec: spec.clone() })
}
