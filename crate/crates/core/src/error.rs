use std::io;

use crate::model::StageName;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the orchestration layers can report.
///
/// `code()` gives the stable snake_case identifier used on the wire (RPC
/// error objects, HTTP error bodies, CLI exit-code mapping).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid identifier {0:?}")]
    InvalidId(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("keypoint key sets differ: {0}")]
    KeySetMismatch(String),
    #[error("batch transition {from} -> {to} is not allowed")]
    InvalidTransition { from: String, to: String },

    #[error("malformed record at byte {offset}: {reason}")]
    MalformedRecord { offset: u64, reason: String },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("evaluator failure: {0}")]
    EvaluatorFailure(String),

    #[error("run {0} is already active")]
    RunAlreadyActive(String),
    #[error("no eligible batch")]
    NoEligibleBatch,
    #[error("unknown batch {0}")]
    UnknownBatch(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is not active")]
    RunNotActive(String),
    #[error("run {0} is still active")]
    RunActive(String),
    #[error("stage {stage} produced invalid output: {reason}")]
    StageOutputInvalid { stage: StageName, reason: String },
    #[error("{stage} loop exhausted its budget of {rounds} rounds")]
    BudgetExhausted { stage: StageName, rounds: u32 },
    #[error("implement round produced no commit")]
    ImplementNoCommit,
    #[error("build failed: {0}")]
    BuildFailed(String),
    #[error("stop requested")]
    StopRequested,
    #[error("no batch is ready to apply")]
    NothingToApply,
    #[error("several batches are ready to apply: {}", .0.join(", "))]
    AmbiguousApply(Vec<String>),

    #[error("unknown provider {0}")]
    UnknownProvider(String),
    #[error("launch failure: {0}")]
    LaunchFailure(String),
    #[error("invocation timed out")]
    Timeout,
    #[error("invocation was cancelled")]
    Cancelled,
    #[error("malformed script: {0}")]
    MalformedScript(String),
    #[error("unknown invocation {0}")]
    UnknownInvocation(String),

    #[error("worker spawn failed: {0}")]
    WorkerSpawnFailed(String),
    #[error("isolation violation on worker {worker}: {reason}")]
    IsolationViolation { worker: String, reason: String },
    #[error("no scores supplied for task {0:?}")]
    EmptyScores(Option<String>),

    #[error("workspace failure: {0}")]
    Workspace(String),
    #[error("container runtime failure: {0}")]
    RuntimeFailure(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("swap supervisor halted: {0}")]
    SwapHalted(String),
    #[error("simulated crash at {0}")]
    SimulatedCrash(String),

    #[error("webhook delivery failed after {attempts} attempts: {reason}")]
    DeliveryFailed { attempts: u32, reason: String },
    #[error("unknown op {0}")]
    UnknownOp(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("transport failure talking to {endpoint}: {reason}")]
    Transport { endpoint: String, reason: String },
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
}

impl Error {
    pub fn code(&self) -> &str {
        match self {
            Error::Io(_) => "io_failure",
            Error::Json(_) => "malformed_document",
            Error::InvalidId(_) => "invalid_id",
            Error::Invariant(_) => "invariant_violation",
            Error::KeySetMismatch(_) => "key_set_mismatch",
            Error::InvalidTransition { .. } => "invalid_transition",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::UnknownSession(_) => "unknown_session",
            Error::EvaluatorFailure(_) => "evaluator_failure",
            Error::RunAlreadyActive(_) => "run_already_active",
            Error::NoEligibleBatch => "no_eligible_batch",
            Error::UnknownBatch(_) => "unknown_batch",
            Error::UnknownRun(_) => "unknown_run",
            Error::RunNotActive(_) => "run_not_active",
            Error::RunActive(_) => "run_active",
            Error::StageOutputInvalid { .. } => "stage_output_invalid",
            Error::BudgetExhausted { .. } => "budget_exhausted",
            Error::ImplementNoCommit => "implement_no_commit",
            Error::BuildFailed(_) => "build_failed",
            Error::StopRequested => "stop_requested",
            Error::NothingToApply => "nothing_to_apply",
            Error::AmbiguousApply(_) => "ambiguous_apply",
            Error::UnknownProvider(_) => "unknown_provider",
            Error::LaunchFailure(_) => "launch_failure",
            Error::Timeout => "timeout",
            Error::Cancelled => "cancelled",
            Error::MalformedScript(_) => "malformed_script",
            Error::UnknownInvocation(_) => "unknown_invocation",
            Error::WorkerSpawnFailed(_) => "worker_spawn_failed",
            Error::IsolationViolation { .. } => "isolation_violation",
            Error::EmptyScores(_) => "empty_scores",
            Error::Workspace(_) => "workspace_failure",
            Error::RuntimeFailure(_) => "runtime_failure",
            Error::UnknownImage(_) => "unknown_image",
            Error::SwapHalted(_) => "swap_halted",
            Error::SimulatedCrash(_) => "simulated_crash",
            Error::DeliveryFailed { .. } => "delivery_failed",
            Error::UnknownOp(_) => "unknown_op",
            Error::BadRequest(_) => "bad_request",
            Error::UnknownScenario(_) => "unknown_scenario",
            Error::Transport { .. } => "transport_failure",
            Error::Remote { code, .. } => code,
        }
    }

    /// Domain errors are the caller's fault or a legitimate refusal; the rest
    /// are infrastructure failures.
    pub fn is_domain(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Transport { .. } | Error::RuntimeFailure(_) | Error::Workspace(_)
        )
    }

    pub(crate) fn invalid_output(stage: StageName, reason: impl Into<String>) -> Self {
        Error::StageOutputInvalid {
            stage,
            reason: reason.into(),
        }
    }
}
