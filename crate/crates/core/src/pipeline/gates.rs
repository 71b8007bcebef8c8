//! Parsing and validation of the structured stage bodies, and the plateau
//! guard.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IterationRecord, KeypointMatrix, StageName, Verdict, VerdictKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    RejectOffTarget,
    RejectTooNarrow,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub decision: Decision,
    #[serde(default)]
    pub notes: String,
}

impl GateDecision {
    pub fn approved(&self) -> bool {
        self.decision == Decision::Approve
    }
}

/// plan_review may approve or reject as off-target / too narrow; code_review
/// may approve or reject.
pub fn parse_gate(stage: StageName, body: &[u8]) -> Result<GateDecision> {
    let g: GateDecision =
        serde_json::from_slice(body).map_err(|e| Error::invalid_output(stage, format!("not a gate decision: {e}")))?;
    let allowed = match stage {
        StageName::PlanReview => matches!(
            g.decision,
            Decision::Approve | Decision::RejectOffTarget | Decision::RejectTooNarrow
        ),
        StageName::CodeReview => matches!(g.decision, Decision::Approve | Decision::Reject),
        _ => false,
    };
    if !allowed {
        return Err(Error::invalid_output(stage, format!("decision {:?} is not valid here", g.decision)));
    }
    Ok(g)
}

/// Task-Evaluate output: bounded keypoints per task, exactly the expected
/// task set, and (after the baseline) exactly the locked key set.
pub fn parse_matrix(body: &[u8], tasks: &[String], locked: Option<&KeypointMatrix>) -> Result<KeypointMatrix> {
    let stage = StageName::TaskEvaluate;
    let m: KeypointMatrix =
        serde_json::from_slice(body).map_err(|e| Error::invalid_output(stage, format!("not a keypoint matrix: {e}")))?;
    let mut expected: Vec<String> = tasks.to_vec();
    expected.sort();
    expected.dedup();
    if m.task_ids() != expected {
        return Err(Error::invalid_output(
            stage,
            format!("matrix covers tasks {:?}, expected {:?}", m.task_ids(), expected),
        ));
    }
    m.check_bounds().map_err(|e| Error::invalid_output(stage, e.to_string()))?;
    if let Some(base) = locked {
        base.check_same_keys(&m).map_err(|e| Error::invalid_output(stage, e.to_string()))?;
    }
    Ok(m)
}

#[derive(Deserialize)]
struct RawVerdict {
    kind: String,
    #[serde(default)]
    rationale: String,
}

pub fn parse_verdict(body: &[u8]) -> Result<Verdict> {
    let stage = StageName::Verdict;
    let raw: RawVerdict =
        serde_json::from_slice(body).map_err(|e| Error::invalid_output(stage, format!("not a verdict: {e}")))?;
    let kind = VerdictKind::parse(raw.kind.trim())
        .ok_or_else(|| Error::invalid_output(stage, format!("unknown verdict kind {:?}", raw.kind)))?;
    Ok(Verdict { kind, rationale: raw.rationale, forced_by_plateau: false })
}

/// Earliest iteration with the highest matrix score.
pub fn peak_iteration(iterations: &[IterationRecord]) -> Option<u32> {
    let mut best: Option<(u32, u32)> = None;
    for it in iterations {
        if let Some(m) = &it.matrix {
            let s = m.score_sum();
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((it.index, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Downgrades NEED_MORE_WORK to a forced CONVERGED when none of the last
/// `window` iterations improved on its predecessor. `iterations` includes the
/// current one with its delta filled in. Returns the verdict and, when forced,
/// the peak iteration.
pub fn plateau_guard(verdict: Verdict, iterations: &[IterationRecord], window: u32) -> (Verdict, Option<u32>) {
    if verdict.kind != VerdictKind::NeedMoreWork || window == 0 || iterations.len() < window as usize {
        return (verdict, None);
    }
    let tail = &iterations[iterations.len() - window as usize..];
    let flat = tail.iter().all(|it| it.delta.as_ref().is_some_and(|d| !d.any_improved));
    if !flat {
        return (verdict, None);
    }
    let peak = peak_iteration(iterations);
    let forced = Verdict {
        kind: VerdictKind::Converged,
        rationale: format!(
            "no keypoint improved for {window} consecutive iterations; converging at peak iteration {}",
            peak.unwrap_or(0)
        ),
        forced_by_plateau: true,
    };
    (forced, peak)
}
