#![allow(dead_code)]

use moss_core::hostd::swap::{Checkpoint, SwapOutcome};
use moss_core::model::{DepthProfile, Level, RunPhase};
use moss_core::sandbox::Stack;
use moss_core::store::StateKey;

use super::*;

pub fn converged_stack() -> (Stack, moss_core::model::EvolutionRun) {
    let t = tasks();
    let mut script = vec![baseline(&t)];
    script.extend(iteration(1, matrix(&t, |_, _| Level::Strong), "CONVERGED"));
    let stack = stack(script);
    let run = run_to_end(&stack, DepthProfile::standard());
    assert_eq!(run.phase, RunPhase::Converged, "{:?}", run.failure);
    (stack, run)
}

pub fn live_images(stack: &Stack) -> Vec<String> {
    stack.daemon.swap().live().unwrap().into_iter().map(|c| c.image_id).collect()
}

/// Runs one swap with a crash armed at `cp`, restarts the daemon and checks
/// the outcome, the live set and the webhook count.
pub fn crash_and_recover(cp: Checkpoint) -> Result<SwapOutcome, String> {
    let (mut stack, run) = converged_stack();
    let old = stack.last_known_good().unwrap().unwrap().image;
    let new = run.candidate_image.clone().unwrap();
    stack.daemon.swap().crash_at(cp);
    let req = stack.service.apply(None).unwrap();
    wait(&stack, || Ok((!stack.store.exists(&StateKey::SwapRequest)?).then_some(())));
    stack.restart_daemon().map_err(|e| format!("restart: {e}"))?;
    let record = stack
        .daemon
        .swap()
        .history(&req.request_id)
        .unwrap()
        .ok_or("no swap record after recovery")?;
    let live = live_images(&stack);
    if live.len() != 1 {
        return Err(format!("{} live substrates: {live:?}", live.len()));
    }
    let expected = match record.outcome {
        SwapOutcome::Committed => &new,
        SwapOutcome::RolledBack => &old,
    };
    if live[0] != expected.image_id {
        return Err(format!("live {} but outcome {:?}", live[0], record.outcome));
    }
    if stack.last_known_good().unwrap().unwrap().image != *expected {
        return Err("last-known-good disagrees with the outcome".into());
    }
    let n = stack.gateway.messages().deliveries(&format!("apply-{}", req.request_id));
    if n != 1 {
        return Err(format!("apply-complete delivered {n} times"));
    }
    stack.shutdown();
    Ok(record.outcome)
}

