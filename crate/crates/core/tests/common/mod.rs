#![allow(dead_code)]

pub mod autoscan_props;
pub mod mock_cli;
pub mod oracles;
pub mod partition;
pub mod recovery;

use std::path::Path;
use std::process::Command;
use std::time::Duration;

use moss_core::cli::{dispatch, CliConfig, CliOutcome};
use moss_core::model::{DepthProfile, EvolutionRun, Level, StageName};
use moss_core::runners::ScriptEntry;
use moss_core::sandbox::{Stack, StackOptions, CASE_STUDY_TASKS};
use serde_json::{json, Value};

pub fn tasks() -> Vec<String> {
    CASE_STUDY_TASKS.iter().map(|(t, _)| t.to_string()).collect()
}

pub fn keypoints(task: &str) -> [&'static str; 4] {
    moss_core::sandbox::keypoints(task)
}

/// `{"tasks": {task: {keypoint: level}}}` with `level(task_index, keypoint_index)`.
pub fn matrix(tasks: &[String], level: impl Fn(usize, usize) -> Level) -> Value {
    let mut doc = serde_json::Map::new();
    for (ti, t) in tasks.iter().enumerate() {
        let row: serde_json::Map<String, Value> = keypoints(t)
            .iter()
            .enumerate()
            .map(|(ki, k)| (k.to_string(), json!(level(ti, ki).as_str())))
            .collect();
        doc.insert(t.clone(), row.into());
    }
    json!({ "tasks": doc })
}

pub fn weak(tasks: &[String]) -> Value {
    matrix(tasks, |_, k| if k % 2 == 0 { Level::Weak } else { Level::Missing })
}

pub fn entry(stage: StageName, iteration: u32, round: Option<u32>, body: impl Into<Value>) -> ScriptEntry {
    let mut e = ScriptEntry::new(stage, body);
    e.iteration = Some(iteration);
    e.round = round;
    e
}

pub fn approve() -> Value {
    json!({ "decision": "approve", "notes": "ok" })
}

pub fn reject(stage: StageName) -> Value {
    match stage {
        StageName::PlanReview => json!({ "decision": "reject_off_target", "notes": "misses the failing path" }),
        _ => json!({ "decision": "reject", "notes": "does not build" }),
    }
}

/// One full iteration: one plan round and one code round, both approved.
pub fn iteration(k: u32, evaluated: Value, verdict: &str) -> Vec<ScriptEntry> {
    vec![
        entry(StageName::Locate, k, None, format!("# Locate {k}\n")),
        entry(StageName::Plan, k, Some(1), format!("# Plan {k}\n")),
        entry(StageName::PlanReview, k, Some(1), approve()),
        entry(StageName::Implement, k, Some(1), format!("# Implement {k}\n"))
            .with_file(format!("src/iteration-{k}.txt"), format!("change {k}\n")),
        entry(StageName::CodeReview, k, Some(1), approve()),
        entry(StageName::TaskEvaluate, k, None, evaluated),
        entry(StageName::Verdict, k, None, json!({ "kind": verdict, "rationale": format!("iteration {k}") })),
    ]
}

pub fn baseline(tasks: &[String]) -> ScriptEntry {
    entry(StageName::TaskEvaluate, 0, None, weak(tasks))
}

pub fn stack(script: Vec<ScriptEntry>) -> Stack {
    Stack::start(StackOptions { script, remote_backends: false, ..Default::default() }).expect("stack starts")
}

pub fn cli(stack: &Stack) -> CliConfig {
    CliConfig::new(stack.gateway_url(), stack.socket())
}

pub fn evo(stack: &Stack, args: &str) -> CliOutcome {
    let argv: Vec<String> = args.split_whitespace().map(String::from).collect();
    dispatch(&argv, Some(&cli(stack)))
}

/// catch-up, then start and drive a run to its end on the calling thread.
pub fn run_to_end(stack: &Stack, depth: DepthProfile) -> EvolutionRun {
    let out = evo(stack, "catch-up");
    assert_eq!(out.code, 0, "{}", out.stderr);
    let run_id = stack.service.start_run(None, depth).expect("run starts");
    stack.service.drive(&run_id).expect("run drives to an end")
}

pub fn wait<T>(stack: &Stack, f: impl FnMut() -> moss_core::Result<Option<T>>) -> T {
    stack.wait_for(Duration::from_secs(30), f).expect("condition reached in time")
}

/// Tree id of `files` committed into a brand-new repository, computed with
/// plain git commands.
pub fn oracle_tree(files: &[(&str, &str)]) -> String {
    let dir = tempfile::tempdir().unwrap();
    let git = |args: &[&str]| {
        let out = Command::new("git").args(args).current_dir(dir.path()).output().unwrap();
        assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().trim().to_string()
    };
    git(&["init", "-q"]);
    for (path, content) in files {
        let p = dir.path().join(path);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, content).unwrap();
    }
    git(&["add", "-A"]);
    git(&["write-tree"])
}

/// Files of the workspace at HEAD, as (path, content) pairs.
pub fn head_files(root: &Path) -> Vec<(String, String)> {
    let out = Command::new("git").args(["ls-files"]).current_dir(root).output().unwrap();
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|p| (p.to_string(), std::fs::read_to_string(root.join(p)).unwrap()))
        .collect()
}

/// Waits for the apply-complete webhook of `request_id` to reach the gateway.
pub fn wait_applied(stack: &Stack, request_id: &str) {
    let id = format!("apply-{request_id}");
    wait(stack, || Ok((stack.gateway.messages().deliveries(&id) > 0).then_some(())));
}
