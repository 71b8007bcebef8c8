use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{doc_version, DeltaReport, KeypointMatrix};
use crate::error::{Error, Result};

/// The seven reasoning stages of one iteration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Locate,
    Plan,
    PlanReview,
    Implement,
    CodeReview,
    TaskEvaluate,
    Verdict,
}

impl StageName {
    pub const ORDER: [StageName; 7] = [
        StageName::Locate,
        StageName::Plan,
        StageName::PlanReview,
        StageName::Implement,
        StageName::CodeReview,
        StageName::TaskEvaluate,
        StageName::Verdict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Locate => "locate",
            StageName::Plan => "plan",
            StageName::PlanReview => "plan_review",
            StageName::Implement => "implement",
            StageName::CodeReview => "code_review",
            StageName::TaskEvaluate => "task_evaluate",
            StageName::Verdict => "verdict",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ORDER
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::BadRequest(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictKind {
    #[serde(rename = "CONVERGED")]
    Converged,
    #[serde(rename = "NEED_MORE_WORK")]
    NeedMoreWork,
    #[serde(rename = "FUNDAMENTAL_LIMIT_MODEL")]
    FundamentalLimitModel,
    #[serde(rename = "FUNDAMENTAL_LIMIT_ARCHITECTURE")]
    FundamentalLimitArchitecture,
}

impl VerdictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Converged => "CONVERGED",
            VerdictKind::NeedMoreWork => "NEED_MORE_WORK",
            VerdictKind::FundamentalLimitModel => "FUNDAMENTAL_LIMIT_MODEL",
            VerdictKind::FundamentalLimitArchitecture => "FUNDAMENTAL_LIMIT_ARCHITECTURE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            VerdictKind::Converged,
            VerdictKind::NeedMoreWork,
            VerdictKind::FundamentalLimitModel,
            VerdictKind::FundamentalLimitArchitecture,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub rationale: String,
    pub forced_by_plateau: bool,
}

impl Verdict {
    pub fn check(&self) -> Result<()> {
        if self.forced_by_plateau && self.kind != VerdictKind::Converged {
            return Err(Error::Invariant("only CONVERGED may be forced by the plateau guard".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthName {
    Light,
    Standard,
    Deep,
}

impl FromStr for DepthName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(DepthName::Light),
            "standard" => Ok(DepthName::Standard),
            "deep" => Ok(DepthName::Deep),
            other => Err(Error::BadRequest(format!("unknown depth {other:?}"))),
        }
    }
}

impl fmt::Display for DepthName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DepthName::Light => "light",
            DepthName::Standard => "standard",
            DepthName::Deep => "deep",
        })
    }
}

/// Evolution-depth dial: every loop budget scales together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub name: DepthName,
    pub max_iterations: u32,
    pub plan_rounds: u32,
    pub code_rounds: u32,
    pub trials_per_task: u32,
    pub plateau_window: u32,
    pub trial_workers_n: u32,
}

impl DepthProfile {
    pub fn light() -> Self {
        Self::preset(DepthName::Light)
    }

    pub fn standard() -> Self {
        Self::preset(DepthName::Standard)
    }

    pub fn deep() -> Self {
        Self::preset(DepthName::Deep)
    }

    pub fn preset(name: DepthName) -> Self {
        let (max_iterations, plan_rounds, code_rounds, trials_per_task, plateau_window, workers) =
            match name {
                DepthName::Light => (2, 2, 2, 1, 2, 1),
                DepthName::Standard => (4, 3, 3, 2, 3, 2),
                DepthName::Deep => (8, 5, 5, 3, 4, 3),
            };
        Self {
            name,
            max_iterations,
            plan_rounds,
            code_rounds,
            trials_per_task,
            plateau_window,
            trial_workers_n: workers,
        }
    }

    pub fn check(&self) -> Result<()> {
        let fields = [
            self.max_iterations,
            self.plan_rounds,
            self.code_rounds,
            self.trials_per_task,
            self.plateau_window,
            self.trial_workers_n,
        ];
        if fields.contains(&0) {
            return Err(Error::BadRequest("depth profile fields must be >= 1".into()));
        }
        if self.plateau_window > self.max_iterations {
            return Err(Error::BadRequest("plateau_window exceeds max_iterations".into()));
        }
        Ok(())
    }
}

impl Default for DepthProfile {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub built_from_rev: String,
    pub built_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunPhase {
    Baseline,
    Iterating,
    Converged,
    /// Round budget or iteration budget exhausted, or an unrecoverable stage failure.
    Failed,
    FailedModelLimit,
    FailedArchitectureLimit,
    Stopped,
}

impl RunPhase {
    pub fn is_active(self) -> bool {
        matches!(self, RunPhase::Baseline | RunPhase::Iterating)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunPhase::Baseline => "baseline",
            RunPhase::Iterating => "iterating",
            RunPhase::Converged => "converged",
            RunPhase::Failed => "failed",
            RunPhase::FailedModelLimit => "failed_model_limit",
            RunPhase::FailedArchitectureLimit => "failed_architecture_limit",
            RunPhase::Stopped => "stopped",
        }
    }
}

impl fmt::Display for RunPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    /// Workspace revision the iteration started from.
    pub base_rev: String,
    pub stage_artifacts: BTreeMap<String, String>,
    pub commit_rev: Option<String>,
    pub image: Option<ImageRef>,
    pub matrix: Option<KeypointMatrix>,
    /// Comparison against the previous iteration (or the baseline for iteration 1).
    pub delta: Option<DeltaReport>,
    pub verdict: Option<Verdict>,
    pub plan_rounds_used: u32,
    pub code_rounds_used: u32,
}

impl IterationRecord {
    pub fn check(&self) -> Result<()> {
        if self.verdict.is_some() && self.matrix.is_none() {
            return Err(Error::Invariant(format!("iteration {} has a verdict but no matrix", self.index)));
        }
        if self.image.is_some() && self.commit_rev.is_none() {
            return Err(Error::Invariant(format!("iteration {} has an image but no commit", self.index)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRun {
    #[serde(default = "doc_version")]
    pub version: u32,
    pub run_id: String,
    pub batch_id: String,
    pub conversation_id: String,
    pub depth: DepthProfile,
    pub phase: RunPhase,
    pub baseline_matrix: Option<KeypointMatrix>,
    pub iterations: Vec<IterationRecord>,
    pub candidate_image: Option<ImageRef>,
    pub peak_iteration: Option<u32>,
    pub current_stage: Option<String>,
    /// Workspace revision at run start; stop and restart reset to it.
    pub start_rev: String,
    pub restarted_from: Option<String>,
    pub failure: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl EvolutionRun {
    pub fn check(&self) -> Result<()> {
        if self.phase == RunPhase::Converged && self.candidate_image.is_none() {
            return Err(Error::Invariant("converged run has no candidate image".into()));
        }
        if self.iterations.len() > self.depth.max_iterations as usize {
            return Err(Error::Invariant("iteration budget exceeded".into()));
        }
        if let Some(peak) = self.peak_iteration {
            if !self.iterations.iter().any(|it| it.index == peak) {
                return Err(Error::Invariant(format!("peak iteration {peak} does not exist")));
            }
        }
        for it in &self.iterations {
            it.check()?;
        }
        Ok(())
    }
}
