use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{transcript_hash, Level, StageName, TranscriptEntry, MAX_KEYPOINTS, MIN_KEYPOINTS};
use crate::runners::{invoke, RunnerRegistry, RunnerSpec};

/// Tags a transcript with 4 to 7 keypoint levels.
pub trait ChunkEvaluator: Send + Sync {
    fn evaluate(&self, transcript: &[TranscriptEntry]) -> Result<Vec<(String, Level)>>;
}

impl<F> ChunkEvaluator for F
where
    F: Fn(&[TranscriptEntry]) -> Result<Vec<(String, Level)>> + Send + Sync,
{
    fn evaluate(&self, transcript: &[TranscriptEntry]) -> Result<Vec<(String, Level)>> {
        self(transcript)
    }
}

pub(crate) fn check_tags(tags: &[(String, Level)]) -> Result<()> {
    if !(MIN_KEYPOINTS..=MAX_KEYPOINTS).contains(&tags.len()) {
        return Err(Error::EvaluatorFailure(format!(
            "evaluator returned {} keypoints, expected {MIN_KEYPOINTS}..={MAX_KEYPOINTS}",
            tags.len()
        )));
    }
    Ok(())
}

/// Sidecar document for [`ScriptedEvaluator`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorScript {
    /// transcript hash -> keypoint -> level
    #[serde(default)]
    pub tags: BTreeMap<String, BTreeMap<String, Level>>,
    /// Used for transcripts the script does not list.
    #[serde(default)]
    pub default: Option<BTreeMap<String, Level>>,
}

/// Deterministic evaluator replaying a hash-to-tags table.
#[derive(Debug, Clone)]
pub struct ScriptedEvaluator {
    script: EvaluatorScript,
}

impl ScriptedEvaluator {
    pub fn new(script: EvaluatorScript) -> Self {
        Self { script }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::new(serde_json::from_slice(&bytes)?))
    }
}

impl ChunkEvaluator for ScriptedEvaluator {
    fn evaluate(&self, transcript: &[TranscriptEntry]) -> Result<Vec<(String, Level)>> {
        let hash = transcript_hash(transcript);
        let tags = self
            .script
            .tags
            .get(&hash)
            .or(self.script.default.as_ref())
            .ok_or_else(|| Error::EvaluatorFailure(format!("no tags scripted for transcript {hash}")))?;
        Ok(tags.iter().map(|(k, l)| (k.clone(), *l)).collect())
    }
}

/// Production evaluator: asks the task_evaluate runner to score the exchange.
pub struct RunnerEvaluator {
    registry: Arc<RunnerRegistry>,
    workspace: PathBuf,
    timeout: Duration,
}

impl RunnerEvaluator {
    pub fn new(registry: Arc<RunnerRegistry>, workspace: PathBuf, timeout: Duration) -> Self {
        Self { registry, workspace, timeout }
    }
}

impl ChunkEvaluator for RunnerEvaluator {
    fn evaluate(&self, transcript: &[TranscriptEntry]) -> Result<Vec<(String, Level)>> {
        let runner = self.registry.get_for_stage(StageName::TaskEvaluate, None)?;
        let rendered = serde_json::to_string_pretty(transcript)?;
        let spec = RunnerSpec {
            provider_name: runner.provider_name().to_string(),
            stage: StageName::TaskEvaluate,
            iteration: 0,
            round: 1,
            workspace_scope: self.workspace.clone(),
            prompt: format!(
                "Score this exchange on four to seven keypoints using the levels \
                 missing, weak, adequate, strong. Reply with a JSON object mapping \
                 keypoint name to level.\n\n{rendered}\n"
            ),
            inputs: Vec::new(),
            timeout: self.timeout,
            env_allowlist: Vec::new(),
        };
        let out = invoke(runner.as_ref(), &spec).map_err(|e| Error::EvaluatorFailure(e.to_string()))?;
        let map: BTreeMap<String, Level> = serde_json::from_slice(&out.body)
            .map_err(|e| Error::EvaluatorFailure(format!("unparseable tags: {e}")))?;
        Ok(map.into_iter().collect())
    }
}
