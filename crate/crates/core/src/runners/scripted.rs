use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::{stage_invocation, HandleState, InvocationPlan, Runner, RunnerHandle, RunnerSpec, StageOutput};
use crate::error::{Error, Result};
use crate::model::StageName;

/// One canned provider response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub stage: StageName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
    /// A string is used verbatim; any other JSON value is pretty-printed.
    pub body: serde_json::Value,
    /// Files written into the workspace scope (path relative to the scope).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub files: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    /// Simulated run time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl ScriptEntry {
    pub fn new(stage: StageName, body: impl Into<serde_json::Value>) -> Self {
        Self {
            stage,
            round: None,
            iteration: None,
            body: body.into(),
            files: BTreeMap::new(),
            exit_status: None,
            delay_ms: None,
        }
    }

    pub fn with_file(mut self, path: impl Into<String>, content: impl Into<String>) -> Self {
        self.files.insert(path.into(), content.into());
        self
    }

    pub fn with_delay(mut self, ms: u64) -> Self {
        self.delay_ms = Some(ms);
        self
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        match &self.body {
            serde_json::Value::String(s) => s.clone().into_bytes(),
            other => serde_json::to_vec_pretty(other).expect("serializing json value"),
        }
    }

    fn matches(&self, spec: &RunnerSpec) -> bool {
        self.stage == spec.stage
            && self.round.is_none_or(|r| r == spec.round)
            && self.iteration.is_none_or(|i| i == spec.iteration)
    }
}

struct Invocation {
    entry: usize,
    plan: InvocationPlan,
    started: Instant,
    state: HandleState,
}

struct Inner {
    consumed: Vec<bool>,
    invocations: HashMap<String, Invocation>,
}

/// Deterministic test double replaying a script of stage bodies in order.
pub struct ScriptedRunner {
    name: String,
    entries: Vec<ScriptEntry>,
    invocations_root: PathBuf,
    inner: Mutex<Inner>,
}

impl ScriptedRunner {
    pub fn new(entries: Vec<ScriptEntry>, invocations_root: impl Into<PathBuf>) -> Self {
        Self::named("scripted", entries, invocations_root)
    }

    pub fn named(name: impl Into<String>, entries: Vec<ScriptEntry>, invocations_root: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            inner: Mutex::new(Inner {
                consumed: vec![false; entries.len()],
                invocations: HashMap::new(),
            }),
            entries,
            invocations_root: invocations_root.into(),
        }
    }

    pub fn load(script_path: &Path, invocations_root: impl Into<PathBuf>) -> Result<Self> {
        let bytes = std::fs::read(script_path)?;
        let entries = parse_script(&bytes)?;
        Ok(Self::new(entries, invocations_root))
    }

    pub fn remaining(&self) -> usize {
        self.inner.lock().unwrap().consumed.iter().filter(|c| !**c).count()
    }
}

pub fn parse_script(bytes: &[u8]) -> Result<Vec<ScriptEntry>> {
    let entries: Vec<ScriptEntry> =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedScript(e.to_string()))?;
    for (i, e) in entries.iter().enumerate() {
        for path in e.files.keys() {
            let p = Path::new(path);
            if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(Error::MalformedScript(format!("entry {i}: file {path:?} escapes the workspace")));
            }
        }
    }
    Ok(entries)
}

impl Runner for ScriptedRunner {
    fn provider_name(&self) -> &str {
        &self.name
    }

    fn prepare(&self, spec: &RunnerSpec) -> Result<InvocationPlan> {
        stage_invocation(&self.invocations_root, spec)
    }

    fn launch(&self, plan: &InvocationPlan) -> Result<RunnerHandle> {
        let mut inner = self.inner.lock().unwrap();
        let idx = (0..self.entries.len())
            .find(|i| !inner.consumed[*i] && self.entries[*i].matches(&plan.spec))
            .ok_or_else(|| {
                Error::LaunchFailure(format!(
                    "script has no entry left for {} (iteration {}, round {})",
                    plan.spec.stage, plan.spec.iteration, plan.spec.round
                ))
            })?;
        inner.consumed[idx] = true;
        let entry = &self.entries[idx];
        for (rel, content) in &entry.files {
            let path = plan.spec.workspace_scope.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, content)?;
        }
        inner.invocations.insert(
            plan.invocation_id.clone(),
            Invocation {
                entry: idx,
                plan: plan.clone(),
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
                .invocations
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
            let entry = &self.entries[inv.entry];
            let elapsed = inv.started.elapsed();
            let delay = Duration::from_millis(entry.delay_ms.unwrap_or(0));
            if elapsed >= inv.plan.spec.timeout && delay > inv.plan.spec.timeout {
                inv.state = HandleState::TimedOut;
                return Err(Error::Timeout);
            }
            if elapsed >= delay {
                inv.state = HandleState::Finished;
                let body = entry.body_bytes();
                let exit_status = entry.exit_status.unwrap_or(0);
                let plan = inv.plan.clone();
                drop(inner);
                std::fs::write(plan.output_path(), &body)?;
                std::fs::write(plan.log_path(), format!("scripted {} exit={exit_status}\n", plan.spec.stage))?;
                return finish(plan.spec.stage, body, exit_status, plan.log_path());
            }
            drop(inner);
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    fn cancel(&self, handle: &RunnerHandle) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(inv) = inner.invocations.get_mut(&handle.invocation_id) {
            if inv.state == HandleState::Running {
                inv.state = HandleState::Cancelled;
            }
        }
        Ok(())
    }

    fn state(&self, invocation_id: &str) -> Option<HandleState> {
        self.inner.lock().unwrap().invocations.get(invocation_id).map(|i| i.state)
    }
}

pub(super) fn finish(stage: StageName, body: Vec<u8>, exit_status: i32, log_path: PathBuf) -> Result<StageOutput> {
    if exit_status == 0 && body.iter().all(u8::is_ascii_whitespace) {
        return Err(Error::LaunchFailure(format!("{stage} produced empty output")));
    }
    Ok(StageOutput { kind: stage, body, exit_status, log_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runners::invoke;

    fn spec(stage: StageName, dir: &Path) -> RunnerSpec {
        RunnerSpec {
            provider_name: "scripted".into(),
            stage,
            iteration: 1,
            round: 1,
            workspace_scope: dir.to_path_buf(),
            prompt: "do it".into(),
            inputs: vec![],
            timeout: Duration::from_secs(5),
            env_allowlist: vec![],
        }
    }

    #[test]
    fn replays_entries_in_order_per_stage() {
        let d = tempfile::tempdir().unwrap();
        let r = ScriptedRunner::new(
            vec![
                ScriptEntry::new(StageName::Plan, "first plan"),
                ScriptEntry::new(StageName::Locate, "diagnosis"),
                ScriptEntry::new(StageName::Plan, "better plan"),
            ],
            d.path().join("inv"),
        );
        let s = spec(StageName::Plan, d.path());
        assert_eq!(invoke(&r, &s).unwrap().body, b"first plan");
        assert_eq!(invoke(&r, &s).unwrap().body, b"better plan");
        assert_eq!(invoke(&r, &spec(StageName::Locate, d.path())).unwrap().body, b"diagnosis");
        assert!(matches!(invoke(&r, &s), Err(Error::LaunchFailure(_))));
    }

    #[test]
    fn json_bodies_and_files() {
        let d = tempfile::tempdir().unwrap();
        let r = ScriptedRunner::new(
            vec![ScriptEntry::new(StageName::Implement, "done").with_file("src/a.txt", "hello")],
            d.path().join("inv"),
        );
        let out = invoke(&r, &spec(StageName::Implement, d.path())).unwrap();
        assert_eq!(out.body, b"done");
        assert_eq!(std::fs::read_to_string(d.path().join("src/a.txt")).unwrap(), "hello");
        let e = ScriptEntry::new(StageName::Verdict, serde_json::json!({"kind": "CONVERGED"}));
        assert!(String::from_utf8(e.body_bytes()).unwrap().contains("\"CONVERGED\""));
    }

    #[test]
    fn malformed_script() {
        assert!(matches!(parse_script(b"{\"not\": \"a list\"}"), Err(Error::MalformedScript(_))));
        assert!(matches!(
            parse_script(br#"[{"stage":"implement","body":"x","files":{"../escape":"y"}}]"#),
            Err(Error::MalformedScript(_))
        ));
    }
}
