#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use chrono::Utc;
use moss_core::clock::{Clock, ManualClock};
use moss_core::hostd::probe::{run_probe_window, ProbeChecks, ProbeDecision, ProbeReport};
use moss_core::model::{matrix_delta, KeypointMatrix, Level, MatrixKey};
use moss_core::trials::aggregate_scores;
use moss_core::Error;

// ---- probe window ---------------------------------------------------------

/// First index whose sample closes three passes in a row, by direct search.
pub fn brute_commit(seq: &[bool]) -> Option<usize> {
    (2..seq.len()).find(|&i| seq[i - 2] && seq[i - 1] && seq[i])
}

fn report(i: usize, pass: bool) -> ProbeReport {
    let checks = ProbeChecks {
        heartbeat_fresh: pass,
        container_running: true,
        cli_probe_a: true,
        cli_probe_b: true,
    };
    ProbeReport::new(i, Utc::now(), checks)
}

/// Runs the window over every pass/fail sequence of length `n` and counts
/// disagreements with the brute-force predicate (decision, commit index,
/// samples taken and simulated elapsed time).
pub fn probe_mismatches(n: usize) -> (u64, u64) {
    let interval = Duration::from_secs(5);
    let mut mismatches = 0;
    let mut cases = 0;
    for bits in 0u32..(1 << n) {
        let seq: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        let clock = ManualClock::default();
        let t0 = clock.now();
        let w = run_probe_window(n, interval, 3, &clock, |i| report(i, seq[i]), |_| Ok(())).unwrap();
        let expected = brute_commit(&seq);
        let taken = expected.map_or(n, |i| i + 1);
        let ok = match (w.decision, expected) {
            (ProbeDecision::Committed { at_sample }, Some(i)) => at_sample == i,
            (ProbeDecision::RolledBack, None) => true,
            _ => false,
        } && w.samples.len() == taken
            && clock.now() - t0 == chrono::Duration::from_std(interval * (taken as u32 - 1)).unwrap();
        cases += 1;
        if !ok {
            mismatches += 1;
        }
    }
    (cases, mismatches)
}

// ---- matrix algebra -------------------------------------------------------

const RANK: [&str; 4] = ["missing", "weak", "adequate", "strong"];

fn rank(l: Level) -> usize {
    RANK.iter().position(|r| *r == l.as_str()).expect("known level")
}

/// Walks every key of the baseline and classifies it by rank.
pub fn delta_oracle(base: &KeypointMatrix, cand: &KeypointMatrix) -> (Vec<MatrixKey>, Vec<MatrixKey>, u32) {
    let mut up = Vec::new();
    let mut down = Vec::new();
    let mut sum = 0;
    for (task, row) in &base.tasks {
        for (k, before) in row {
            let after = cand.tasks[task][k];
            let (b, a) = (rank(*before), rank(after));
            if a > b {
                up.push(MatrixKey::new(task.clone(), k.clone()));
            } else if a < b {
                down.push(MatrixKey::new(task.clone(), k.clone()));
            }
        }
    }
    for row in cand.tasks.values() {
        for l in row.values() {
            sum += rank(*l) as u32;
        }
    }
    (up, down, sum)
}

pub fn delta_agrees(base: &KeypointMatrix, cand: &KeypointMatrix) -> Result<(), String> {
    let d = matrix_delta(base, cand).map_err(|e| e.to_string())?;
    let (up, down, sum) = delta_oracle(base, cand);
    let sorted = |v: &[MatrixKey]| v.iter().cloned().collect::<BTreeSet<_>>();
    if sorted(&d.improved_keys) != sorted(&up)
        || sorted(&d.regressed_keys) != sorted(&down)
        || d.any_improved != !up.is_empty()
        || d.score_sum != sum
    {
        return Err(format!("delta {d:?} disagrees with oracle up={up:?} down={down:?} sum={sum}"));
    }
    Ok(())
}

/// Every pair of 4-keypoint single-task matrices: 4^4 x 4^4 combinations,
/// which covers all 16 level pairs on each key.
pub fn exhaustive_delta_mismatches() -> (u64, u64) {
    let build = |code: usize| {
        let mut m = KeypointMatrix::new();
        for k in 0..4 {
            m.set("t", format!("k{k}"), Level::ALL[code >> (2 * k) & 3]);
        }
        m
    };
    let all: Vec<KeypointMatrix> = (0..256).map(build).collect();
    let mut cases = 0;
    let mut bad = 0;
    for a in &all {
        for b in &all {
            cases += 1;
            if delta_agrees(a, b).is_err() {
                bad += 1;
            }
        }
    }
    (cases, bad)
}

pub fn lock_violation_detected(base: &KeypointMatrix, mutate: impl FnOnce(&mut KeypointMatrix)) -> bool {
    let mut cand = base.clone();
    mutate(&mut cand);
    matches!(matrix_delta(base, &cand), Err(Error::KeySetMismatch(_)))
        && matches!(base.check_same_keys(&cand), Err(Error::KeySetMismatch(_)))
}

// ---- scoring --------------------------------------------------------------

pub const REFERENCE_BEFORE: [(&str, f64); 4] =
    [("T141zh", 0.3273), ("T142", 0.2527), ("T137zh", 0.2213), ("T138", 0.2090)];
pub const REFERENCE_AFTER: [(&str, f64); 4] =
    [("T141zh", 0.5330), ("T142", 0.5453), ("T137zh", 0.4567), ("T138", 0.9049)];

pub fn reference_means() -> (f64, f64) {
    let of = |rows: &[(&str, f64)]| {
        let m: BTreeMap<String, Vec<f64>> = rows.iter().map(|(t, s)| (t.to_string(), vec![*s])).collect();
        aggregate_scores(&m).unwrap().overall_mean
    };
    (of(&REFERENCE_BEFORE), of(&REFERENCE_AFTER))
}
