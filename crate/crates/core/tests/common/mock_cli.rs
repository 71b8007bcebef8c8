#![allow(dead_code)]

//! A stub coding-agent CLI: a shell script that replays script entries
//! materialized on disk, so the subprocess runner can be driven with exactly
//! the bodies the scripted runner would return.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use moss_core::model::StageName;
use moss_core::runners::{HandleState, Runner, RunnerSpec, ScriptEntry, SubprocessConfig, SubprocessRunner};
use std::collections::BTreeMap;

use moss_core::model::{DepthProfile, Level, RunPhase};
use moss_core::sandbox::{Stack, StackOptions};
use moss_core::Error;

use super::*;

const SCRIPT: &str = r#"#!/bin/sh
out="$1"
echo $$ >> "$MOCK_DIR/pids"
for d in "$MOCK_DIR"/entries/*/; do
  [ -e "$d/used" ] && continue
  [ "$(cat "$d/stage")" = "$MOSS_STAGE" ] || continue
  i=$(cat "$d/iter"); [ "$i" = any ] || [ "$i" = "$MOSS_ITERATION" ] || continue
  r=$(cat "$d/round"); [ "$r" = any ] || [ "$r" = "$MOSS_ROUND" ] || continue
  touch "$d/used"
  if [ -d "$d/files" ]; then cp -R "$d/files/." .; fi
  if [ -e "$d/orphan" ]; then sleep 60 & echo $! >> "$MOCK_DIR/pids"; fi
  if [ -f "$d/delay" ]; then sleep "$(cat "$d/delay")"; fi
  code=0
  if [ -f "$d/exit" ]; then code=$(cat "$d/exit"); fi
  cat "$d/body" > "$out"
  exit "$code"
done
echo "no entry left for $MOSS_STAGE iteration $MOSS_ITERATION round $MOSS_ROUND" >&2
exit 9
"#;

pub struct MockCli {
    pub dir: PathBuf,
}

impl MockCli {
    pub fn materialize(dir: &Path, entries: &[ScriptEntry]) -> Self {
        std::fs::create_dir_all(dir.join("entries")).unwrap();
        std::fs::write(dir.join("mock-cli.sh"), SCRIPT).unwrap();
        for (n, e) in entries.iter().enumerate() {
            let d = dir.join("entries").join(format!("{n:04}"));
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("stage"), e.stage.as_str()).unwrap();
            let any = |v: Option<u32>| v.map(|v| v.to_string()).unwrap_or_else(|| "any".into());
            std::fs::write(d.join("iter"), any(e.iteration)).unwrap();
            std::fs::write(d.join("round"), any(e.round)).unwrap();
            std::fs::write(d.join("body"), e.body_bytes()).unwrap();
            if let Some(ms) = e.delay_ms {
                std::fs::write(d.join("delay"), format!("{:.3}", ms as f64 / 1000.0)).unwrap();
            }
            if let Some(code) = e.exit_status {
                std::fs::write(d.join("exit"), code.to_string()).unwrap();
            }
            for (rel, content) in &e.files {
                let p = d.join("files").join(rel);
                std::fs::create_dir_all(p.parent().unwrap()).unwrap();
                std::fs::write(p, content).unwrap();
            }
        }
        Self { dir: dir.to_path_buf() }
    }

    /// Makes entry `n` leave a background grandchild behind.
    pub fn orphan(&self, n: usize) {
        std::fs::write(self.dir.join("entries").join(format!("{n:04}")).join("orphan"), "").unwrap();
    }

    pub fn runner(&self, name: &str) -> SubprocessRunner {
        let script = self.dir.join("mock-cli.sh").to_string_lossy().into_owned();
        let mut cfg = SubprocessConfig::new(vec!["sh".into(), script, "{output_path}".into()]);
        cfg.env.insert("MOCK_DIR".into(), self.dir.to_string_lossy().into_owned());
        SubprocessRunner::new(name, cfg, self.dir.join("invocations"))
    }

    pub fn pids(&self) -> Vec<u32> {
        std::fs::read_to_string(self.dir.join("pids"))
            .unwrap_or_default()
            .lines()
            .filter_map(|l| l.trim().parse().ok())
            .collect()
    }
}

/// Gone, or a zombie waiting for a reaper that is not ours.
pub fn process_dead(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Err(_) => true,
        Ok(stat) => stat
            .rsplit_once(')')
            .and_then(|(_, rest)| rest.split_whitespace().next())
            .is_some_and(|state| state == "Z" || state == "X"),
    }
}

pub fn all_dead(pids: &[u32]) -> bool {
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        if pids.iter().all(|p| process_dead(*p)) {
            return true;
        }
        if Instant::now() > deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

/// Entries used by the lifecycle suite, in launch order.
pub fn lifecycle_entries() -> Vec<ScriptEntry> {
    vec![
        ScriptEntry::new(StageName::Plan, "# plan\n").with_file("notes/plan.txt", "from the runner\n"),
        ScriptEntry::new(StageName::Implement, "# slow\n").with_delay(5_000),
        ScriptEntry::new(StageName::Implement, "# cancelled\n").with_delay(5_000),
        ScriptEntry::new(StageName::Locate, "# quick\n"),
    ]
}

pub struct Lifecycle<'a> {
    pub runner: Arc<dyn Runner>,
    pub workspace: &'a Path,
    /// Processes the runner started, when it starts any.
    pub pids: Box<dyn Fn() -> Vec<u32> + 'a>,
}

fn spec(runner: &dyn Runner, workspace: &Path, stage: StageName, timeout: Duration, inputs: Vec<PathBuf>) -> RunnerSpec {
    RunnerSpec {
        provider_name: runner.provider_name().to_string(),
        stage,
        iteration: 1,
        round: 1,
        workspace_scope: workspace.to_path_buf(),
        prompt: format!("do the {stage} step\n"),
        inputs,
        timeout,
        env_allowlist: Vec::new(),
    }
}

/// prepare/launch/collect, timeout, cancel idempotence and no orphans.
/// Returns a description of the first violation.
pub fn lifecycle_suite(l: &Lifecycle<'_>) -> Result<(), String> {
    let r = l.runner.as_ref();
    let input = l.workspace.join("input.txt");
    std::fs::write(&input, "evidence\n").map_err(|e| e.to_string())?;

    // happy path
    let s = spec(r, l.workspace, StageName::Plan, Duration::from_secs(10), vec![input]);
    let plan = r.prepare(&s).map_err(|e| format!("prepare: {e}"))?;
    let prompt = std::fs::read_to_string(plan.prompt_path()).map_err(|e| format!("prompt.md: {e}"))?;
    if prompt != s.prompt {
        return Err("prompt.md does not hold the rendered prompt".into());
    }
    if !plan.dir.join("inputs").join("00-input.txt").is_file() {
        return Err("inputs were not staged".into());
    }
    let h = r.launch(&plan).map_err(|e| format!("launch: {e}"))?;
    let out = r.collect(&h).map_err(|e| format!("collect: {e}"))?;
    if out.body != b"# plan\n" || out.exit_status != 0 || out.kind != StageName::Plan {
        return Err(format!("unexpected output {:?}", String::from_utf8_lossy(&out.body)));
    }
    if std::fs::read_to_string(l.workspace.join("notes/plan.txt")).ok().as_deref() != Some("from the runner\n") {
        return Err("file edits did not land in the workspace".into());
    }
    if r.state(&h.invocation_id) != Some(HandleState::Finished) {
        return Err("finished handle is not reported as finished".into());
    }
    r.cancel(&h).map_err(|e| format!("cancel after finish: {e}"))?;
    if r.state(&h.invocation_id) != Some(HandleState::Finished) {
        return Err("cancel changed a terminal handle".into());
    }

    // timeout
    let s = spec(r, l.workspace, StageName::Implement, Duration::from_millis(300), vec![]);
    let plan = r.prepare(&s).map_err(|e| format!("prepare: {e}"))?;
    let h = r.launch(&plan).map_err(|e| format!("launch: {e}"))?;
    let t0 = Instant::now();
    match r.collect(&h) {
        Err(Error::Timeout) => {}
        other => return Err(format!("expected a timeout, got {other:?}")),
    }
    if t0.elapsed() > Duration::from_secs(3) {
        return Err(format!("timeout took {:?}", t0.elapsed()));
    }
    if r.state(&h.invocation_id) != Some(HandleState::TimedOut) {
        return Err("timed-out handle state".into());
    }

    // cancel, twice
    let s = spec(r, l.workspace, StageName::Implement, Duration::from_secs(30), vec![]);
    let plan = r.prepare(&s).map_err(|e| format!("prepare: {e}"))?;
    let h = r.launch(&plan).map_err(|e| format!("launch: {e}"))?;
    std::thread::sleep(Duration::from_millis(100));
    r.cancel(&h).map_err(|e| format!("cancel: {e}"))?;
    r.cancel(&h).map_err(|e| format!("second cancel: {e}"))?;
    if r.state(&h.invocation_id) != Some(HandleState::Cancelled) {
        return Err("cancelled handle state".into());
    }
    match r.collect(&h) {
        Err(Error::Cancelled) => {}
        other => return Err(format!("collect after cancel gave {other:?}")),
    }

    // quick one after the others, to show the runner is still usable
    let s = spec(r, l.workspace, StageName::Locate, Duration::from_secs(10), vec![]);
    let out = moss_core::runners::invoke(r, &s).map_err(|e| format!("invoke: {e}"))?;
    if out.body != b"# quick\n" {
        return Err("runner unusable after cancel".into());
    }

    let pids = (l.pids)();
    if !all_dead(&pids) {
        let alive: Vec<u32> = pids.into_iter().filter(|p| !process_dead(*p)).collect();
        return Err(format!("processes still alive: {alive:?}"));
    }
    Ok(())
}

// ---- identical bodies through both providers ------------------------------

pub fn conformance_script() -> Vec<ScriptEntry> {
    let t = tasks();
    let mut s = vec![baseline(&t)];
    s.extend([
        entry(StageName::Locate, 1, None, "# Locate\nadapter drops the SLA tier\n"),
        entry(StageName::Plan, 1, Some(1), "# Plan A\n"),
        entry(StageName::PlanReview, 1, Some(1), reject(StageName::PlanReview)),
        entry(StageName::Plan, 1, Some(2), "# Plan B\n"),
        entry(StageName::PlanReview, 1, Some(2), approve()),
        entry(StageName::Implement, 1, Some(1), "# first try\n").with_file("src/adapter.txt", "v1\n"),
        entry(StageName::CodeReview, 1, Some(1), reject(StageName::CodeReview)),
        entry(StageName::Implement, 1, Some(2), "# second try\n").with_file("src/adapter.txt", "v2\n"),
        entry(StageName::CodeReview, 1, Some(2), approve()),
        entry(StageName::TaskEvaluate, 1, None, matrix(&t, |_, k| if k == 0 { Level::Strong } else { Level::Weak })),
        entry(StageName::Verdict, 1, None, serde_json::json!({ "kind": "CONVERGED", "rationale": "lifted" })),
    ]);
    s
}

/// Every file of the run's iteration directories except trial transcripts,
/// plus the baseline matrix, keyed by path relative to the run directory.
pub fn artifacts(run_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(run_dir).unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                if !rel.ends_with("trials") {
                    stack.push(p);
                }
            } else if rel.starts_with("iter-") || rel == "baseline/matrix.json" {
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn converge_with(runner: Option<Arc<dyn Runner>>) -> BTreeMap<String, Vec<u8>> {
    let stack = Stack::start(StackOptions { script: conformance_script(), remote_backends: false, runner, ..Default::default() })
        .unwrap();
    let run = run_to_end(&stack, DepthProfile::standard());
    assert_eq!(run.phase, RunPhase::Converged, "{:?}", run.failure);
    let a = artifacts(&stack.store.run_dir(&run.run_id).unwrap());
    stack.shutdown();
    a
}

