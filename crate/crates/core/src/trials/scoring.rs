use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub per_task_mean: BTreeMap<String, f64>,
    pub overall_mean: f64,
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

/// Per-task arithmetic mean over trials, then the mean of the per-task means.
/// Reported values are rounded to four decimals; the overall mean is taken
/// over the unrounded per-task means.
pub fn aggregate_scores(per_task_trial_scores: &BTreeMap<String, Vec<f64>>) -> Result<ScoreSummary> {
    if per_task_trial_scores.is_empty() {
        return Err(Error::EmptyScores(None));
    }
    let mut raw = BTreeMap::new();
    for (task, scores) in per_task_trial_scores {
        if scores.is_empty() {
            return Err(Error::EmptyScores(Some(task.clone())));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::BadRequest(format!("score {bad} for task {task} is outside [0, 1]")));
        }
        raw.insert(task.clone(), scores.iter().sum::<f64>() / scores.len() as f64);
    }
    let overall = raw.values().sum::<f64>() / raw.len() as f64;
    Ok(ScoreSummary {
        per_task_mean: raw.into_iter().map(|(k, v)| (k, round4(v))).collect(),
        overall_mean: round4(overall),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_single_trial() {
        let s = aggregate_scores(&BTreeMap::from([("t".to_string(), vec![0.5])])).unwrap();
        assert_eq!(s.per_task_mean["t"], 0.5);
        assert_eq!(s.overall_mean, 0.5);
    }

    #[test]
    fn mean_of_means() {
        let s = aggregate_scores(&BTreeMap::from([
            ("a".to_string(), vec![0.0, 1.0]),
            ("b".to_string(), vec![1.0]),
        ]))
        .unwrap();
        assert_eq!(s.overall_mean, 0.75);
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(aggregate_scores(&BTreeMap::new()), Err(Error::EmptyScores(None))));
        let with_empty = BTreeMap::from([("t".to_string(), vec![])]);
        assert!(matches!(aggregate_scores(&with_empty), Err(Error::EmptyScores(Some(_)))));
    }
}
