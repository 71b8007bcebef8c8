use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde_json::json;

use crate::autoscan::SessionRecord;
use crate::autoscan::EvaluatorScript;
use crate::error::{Error, Result};
use crate::model::{transcript_hash, Level, Role, StageName, TranscriptEntry};
use crate::runners::ScriptEntry;
use crate::store::write_atomic;

pub const SCENARIOS: [&str; 3] = ["eight-weak-exchanges", "all-strong", "case-study"];

/// Task ids of the four compliance-audit fixtures, with synthesized prompts.
pub const CASE_STUDY_TASKS: [(&str, &str); 4] = [
    (
        "T141zh",
        "T141zh: 请列出所有 P1 违规工单，并根据配置服务中的分级规则计算每张工单的 SLA 合规情况。",
    ),
    (
        "T142",
        "T142: List every P1 violation ticket and compute per-ticket SLA compliance against the tiered rules served by the config service.",
    ),
    (
        "T137zh",
        "T137zh: 追踪调度任务、集成配置和库存水平，报告哪些补货任务失败、哪个集成出错、哪些库存不足。",
    ),
    (
        "T138",
        "T138: Trace the scheduler jobs, integration configs and inventory levels; report which restock jobs fail, which integration is broken and which inventory is short.",
    ),
];

const CONVERSATION: &str = "conv-ops";

/// Files written by [`generate_sessions`].
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub session_dir: PathBuf,
    pub sessions: Vec<String>,
    pub evaluator_path: PathBuf,
    pub evaluator: EvaluatorScript,
    pub conversation_id: String,
    /// Chunks the scripted evaluator marks as failure evidence.
    pub expected_admitted: usize,
    pub task_ids: Vec<String>,
}

/// Keypoints a fixture task is graded on.
pub fn keypoints(task_id: &str) -> [&'static str; 4] {
    if task_id.starts_with("T14") {
        ["ticket_coverage", "sla_tier_classification", "customer_attribution", "aggregate_summary"]
    } else {
        ["failing_jobs", "broken_integration", "inventory_shortfall", "chain_completeness"]
    }
}

fn base_ts() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2026-03-02T09:00:00Z").unwrap().into()
}

/// One exchange: user prompt, a tool call, the agent's (partial) answer.
fn exchange(prompt: &str, attempt: usize, task_id: &str) -> Vec<(Role, String)> {
    let reply = if task_id.starts_with("T14") {
        format!("Found some P1 tickets; response data incomplete, compliance status indeterminate (attempt {attempt}).")
    } else {
        format!("Scheduler job restock-7 looks unhealthy; could not trace the rest of the chain (attempt {attempt}).")
    };
    vec![
        (Role::User, prompt.to_string()),
        (Role::Tool, format!("GET /mock/{task_id}/records -> 200 (attempt {attempt})")),
        (Role::Agent, reply),
    ]
}

/// Writes deterministic session logs plus an evaluator sidecar into `dir`.
pub fn generate_sessions(name: &str, dir: &Path) -> Result<Scenario> {
    let (sessions, strong): (Vec<(&str, usize, Vec<usize>)>, bool) = match name {
        "eight-weak-exchanges" => (vec![("s-alpha", 1, vec![0, 1, 2, 3]), ("s-beta", 2, vec![0, 1, 2, 3])], false),
        "all-strong" => (vec![("s-alpha", 1, vec![0, 1, 2, 3]), ("s-beta", 2, vec![0, 1, 2, 3])], true),
        "case-study" => (vec![("s-case", 1, vec![0, 1, 2, 3])], false),
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    std::fs::create_dir_all(dir)?;
    let mut script = EvaluatorScript::default();
    let mut admitted = 0;
    let mut names = Vec::new();
    for (session_id, attempt, tasks) in &sessions {
        let mut lines = Vec::new();
        let mut turn = 0i64;
        for &t in tasks {
            let (task_id, prompt) = CASE_STUDY_TASKS[t];
            let mut transcript = Vec::new();
            for (role, content) in exchange(prompt, *attempt, task_id) {
                let ts = base_ts() + Duration::minutes(60 * *attempt as i64) + Duration::seconds(turn * 7);
                let rec = SessionRecord {
                    ts,
                    session_id: session_id.to_string(),
                    conversation_id: CONVERSATION.into(),
                    turn_index: turn,
                    role,
                    content,
                };
                transcript.push(TranscriptEntry { turn_index: turn, role, content: rec.content.clone(), ts });
                lines.push(serde_json::to_string(&rec)?);
                turn += 1;
            }
            let levels: BTreeMap<String, Level> = keypoints(task_id)
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let l = match (strong, i % 2) {
                        (true, _) => Level::Strong,
                        (false, 0) => Level::Weak,
                        (false, _) => Level::Missing,
                    };
                    (k.to_string(), l)
                })
                .collect();
            if !strong {
                admitted += 1;
            }
            script.tags.insert(transcript_hash(&transcript), levels);
        }
        let mut text = lines.join("\n");
        text.push('\n');
        write_atomic(&dir.join(format!("{session_id}.jsonl")), text.as_bytes(), |_| Ok(()))?;
        names.push(session_id.to_string());
    }
    let evaluator_path = dir.join("evaluator.json");
    let mut bytes = serde_json::to_vec_pretty(&script)?;
    bytes.push(b'\n');
    write_atomic(&evaluator_path, &bytes, |_| Ok(()))?;
    let mut task_ids: Vec<String> = sessions
        .iter()
        .flat_map(|(_, _, t)| t.iter().map(|&i| CASE_STUDY_TASKS[i].0.to_string()))
        .collect();
    task_ids.sort();
    task_ids.dedup();
    Ok(Scenario {
        name: name.to_string(),
        session_dir: dir.to_path_buf(),
        sessions: names,
        evaluator_path,
        evaluator: script,
        conversation_id: CONVERSATION.into(),
        expected_admitted: admitted,
        task_ids,
    })
}

fn matrix(tasks: &[String], level: impl Fn(usize) -> Level) -> serde_json::Value {
    let mut doc = serde_json::Map::new();
    for t in tasks {
        let row: serde_json::Map<String, serde_json::Value> = keypoints(t)
            .iter()
            .enumerate()
            .map(|(i, k)| (k.to_string(), json!(level(i).as_str())))
            .collect();
        doc.insert(t.clone(), row.into());
    }
    json!({ "tasks": doc })
}

/// Runner script for a run that converges in one iteration with one plan and
/// one code round: weak baseline, improved matrix, CONVERGED.
pub fn converge_script(tasks: &[String]) -> Vec<ScriptEntry> {
    let mut behavior = serde_json::Map::new();
    for t in tasks {
        behavior.insert(
            t.clone(),
            json!({ "response": format!("{t}: complete per-item report with an aggregate summary.") }),
        );
    }
    let behavior = serde_json::to_string_pretty(&json!({ "tasks": behavior })).unwrap();
    let at = |mut e: ScriptEntry, iteration: u32| {
        e.iteration = Some(iteration);
        e
    };
    vec![
        at(ScriptEntry::new(StageName::TaskEvaluate, matrix(tasks, |i| if i % 2 == 0 { Level::Weak } else { Level::Missing })), 0),
        at(ScriptEntry::new(StageName::Locate, "# Locate\n\nThe reply path drops records once a tool response is paginated.\n"), 1),
        at(ScriptEntry::new(StageName::Plan, "# Plan\n\nFollow pagination in the tool adapter and annotate partial results.\n"), 1),
        at(ScriptEntry::new(StageName::PlanReview, json!({ "decision": "approve", "notes": "scoped to the adapter" })), 1),
        at(
            ScriptEntry::new(StageName::Implement, "# Implement\n\nAdapter now follows pagination.\n")
                .with_file("behavior.json", behavior)
                .with_file("src/adapter.txt", "follow_pagination = true\n"),
            1,
        ),
        at(ScriptEntry::new(StageName::CodeReview, json!({ "decision": "approve", "notes": "looks right" })), 1),
        at(ScriptEntry::new(StageName::TaskEvaluate, matrix(tasks, |i| if i % 2 == 0 { Level::Strong } else { Level::Adequate })), 1),
        at(ScriptEntry::new(StageName::Verdict, json!({ "kind": "CONVERGED", "rationale": "every keypoint improved" })), 1),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_scenario() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(generate_sessions("nope", d.path()), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let sa = generate_sessions("eight-weak-exchanges", a.path()).unwrap();
        generate_sessions("eight-weak-exchanges", b.path()).unwrap();
        for s in &sa.sessions {
            let f = format!("{s}.jsonl");
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
        assert_eq!(sa.expected_admitted, 8);
        assert_eq!(sa.task_ids.len(), 4);
    }
}
