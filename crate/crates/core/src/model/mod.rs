//! Domain model shared by every other module.

mod batch;
mod level;
mod matrix;
mod run;
mod transcript;

pub use batch::{Batch, BatchState, ChunkRecord, DEFAULT_SEAL_THRESHOLD};
pub use level::{level_order, Level};
pub use matrix::{matrix_delta, DeltaReport, KeypointMatrix, MatrixKey, MAX_KEYPOINTS, MIN_KEYPOINTS};
pub use run::{
    DepthName, DepthProfile, EvolutionRun, ImageRef, IterationRecord, RunPhase, StageName, Verdict,
    VerdictKind,
};
pub use transcript::{transcript_hash, Role, TranscriptEntry};

pub(crate) const DOC_VERSION: u32 = 1;

pub(crate) fn doc_version() -> u32 {
    DOC_VERSION
}
