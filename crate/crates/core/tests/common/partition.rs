#![allow(dead_code)]

use std::collections::BTreeMap;

use moss_core::cli::{Route, SUBCOMMANDS};
use moss_core::model::{Level, StageName};
use moss_core::traffic::{TrafficEntry, Transport};

use super::*;

pub fn script() -> Vec<moss_core::runners::ScriptEntry> {
    let t = tasks();
    // the first run is stopped after a slow locate; its restart converges
    let mut s = vec![baseline(&t), entry(StageName::Locate, 1, None, "# slow\n").with_delay(800)];
    s.extend(iteration(1, matrix(&t, |_, _| Level::Strong), "CONVERGED"));
    s
}

/// Exercises all nine subcommands against a stack whose pipeline uses
/// in-process backends, so the CLI is the only client of either transport.
/// Returns the traffic recorded for each subcommand.
pub fn exercise(stack: &moss_core::sandbox::Stack) -> Result<BTreeMap<&'static str, Vec<TrafficEntry>>, String> {
    let mut seen = BTreeMap::new();
    let mut run = |name: &'static str, args: String| -> Result<String, String> {
        stack.traffic.drain();
        let out = evo(stack, &args);
        if out.code != 0 {
            return Err(format!("`{args}` exited {}: {}", out.code, out.stderr));
        }
        seen.entry(name).or_insert_with(Vec::new).extend(stack.traffic.drain());
        Ok(out.stdout)
    };
    run("catch-up", "catch-up".into())?;
    run("flag", format!("flag --session {}", stack.scenario.sessions[0]))?;
    let batches: serde_json::Value = serde_json::from_str(&run("batches", "batches --json".into())?).unwrap();
    let batch_id = batches[0]["batch_id"].as_str().ok_or("no batch listed")?.to_string();
    run("batch", format!("batch --batch {batch_id}"))?;
    let run_id = run("start", "start --depth standard".into())?.trim().to_string();
    stack
        .wait_for(std::time::Duration::from_secs(30), || {
            Ok(stack.service.load_run(&run_id)?.current_stage.filter(|s| s == "locate"))
        })
        .map_err(|e| e.to_string())?;
    run("stop", format!("stop --run {run_id}"))?;
    stack.gateway.wait_idle();
    run("status", format!("status --run {run_id}"))?;
    run("restart", format!("restart --run {run_id}"))?;
    stack.gateway.wait_idle();
    run("apply", "apply".into())?;
    Ok(seen)
}

/// Every subcommand produced traffic, and only on its own transport.
pub fn check(seen: &BTreeMap<&'static str, Vec<TrafficEntry>>) -> Result<(), String> {
    for (name, route) in SUBCOMMANDS {
        let want = match route {
            Route::Http => Transport::Http,
            Route::Rpc => Transport::Rpc,
        };
        let entries = seen.get(name).ok_or_else(|| format!("{name} was not exercised"))?;
        if entries.is_empty() {
            return Err(format!("{name} produced no traffic"));
        }
        if let Some(bad) = entries.iter().find(|e| e.transport != want) {
            return Err(format!("{name} used {:?} ({})", bad.transport, bad.label));
        }
    }
    Ok(())
}
