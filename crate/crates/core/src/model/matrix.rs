use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Level;
use crate::error::{Error, Result};

pub const MIN_KEYPOINTS: usize = 4;
pub const MAX_KEYPOINTS: usize = 7;

/// One cell address in a keypoint matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MatrixKey {
    pub task_id: String,
    pub keypoint: String,
}

impl MatrixKey {
    pub fn new(task_id: impl Into<String>, keypoint: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            keypoint: keypoint.into(),
        }
    }
}

impl fmt::Display for MatrixKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.task_id, self.keypoint)
    }
}

/// Per-task map of keypoint name to level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointMatrix {
    pub tasks: BTreeMap<String, BTreeMap<String, Level>>,
}

impl KeypointMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, task_id: impl Into<String>, keypoint: impl Into<String>, level: Level) {
        self.tasks
            .entry(task_id.into())
            .or_default()
            .insert(keypoint.into(), level);
    }

    pub fn get(&self, key: &MatrixKey) -> Option<Level> {
        self.tasks.get(&key.task_id)?.get(&key.keypoint).copied()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn keypoint_count(&self, task_id: &str) -> usize {
        self.tasks.get(task_id).map_or(0, BTreeMap::len)
    }

    pub fn key_set(&self) -> BTreeSet<MatrixKey> {
        self.cells().map(|(k, _)| k).collect()
    }

    pub fn cells(&self) -> impl Iterator<Item = (MatrixKey, Level)> + '_ {
        self.tasks.iter().flat_map(|(task, kps)| {
            kps.iter()
                .map(move |(kp, level)| (MatrixKey::new(task.clone(), kp.clone()), *level))
        })
    }

    pub fn score_sum(&self) -> u32 {
        self.cells().map(|(_, l)| l.ordinal()).sum()
    }

    /// Every task must carry between four and seven keypoints.
    pub fn check_bounds(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Invariant("matrix has no tasks".into()));
        }
        for (task, kps) in &self.tasks {
            if !(MIN_KEYPOINTS..=MAX_KEYPOINTS).contains(&kps.len()) {
                return Err(Error::Invariant(format!(
                    "task {task} has {} keypoints, expected {MIN_KEYPOINTS}..={MAX_KEYPOINTS}",
                    kps.len()
                )));
            }
        }
        Ok(())
    }

    pub fn check_same_keys(&self, other: &KeypointMatrix) -> Result<()> {
        let mine = self.key_set();
        let theirs = other.key_set();
        if mine == theirs {
            return Ok(());
        }
        let missing: Vec<String> = mine.difference(&theirs).map(|k| k.to_string()).collect();
        let extra: Vec<String> = theirs.difference(&mine).map(|k| k.to_string()).collect();
        Err(Error::KeySetMismatch(format!(
            "missing [{}], unexpected [{}]",
            missing.join(", "),
            extra.join(", ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub improved_keys: Vec<MatrixKey>,
    pub regressed_keys: Vec<MatrixKey>,
    pub any_improved: bool,
    pub score_sum: u32,
}

/// Compares a candidate matrix cell-by-cell against a reference matrix with
/// the identical key set.
pub fn matrix_delta(baseline: &KeypointMatrix, candidate: &KeypointMatrix) -> Result<DeltaReport> {
    baseline.check_same_keys(candidate)?;
    let mut improved_keys = Vec::new();
    let mut regressed_keys = Vec::new();
    for ((key, before), (_, after)) in baseline.cells().zip(candidate.cells()) {
        match after.cmp(&before) {
            std::cmp::Ordering::Greater => improved_keys.push(key),
            std::cmp::Ordering::Less => regressed_keys.push(key),
            std::cmp::Ordering::Equal => {}
        }
    }
    Ok(DeltaReport {
        any_improved: !improved_keys.is_empty(),
        improved_keys,
        regressed_keys,
        score_sum: candidate.score_sum(),
    })
}
