//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//! Run with `cargo test -p moss-core --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::mock_cli::{conformance_script, converge_with, lifecycle_entries, lifecycle_suite, Lifecycle, MockCli};
use common::oracles::*;
use common::recovery::{converged_stack, crash_and_recover, live_images};
use common::*;
use moss_core::cli::{dispatch, CliConfig};
use moss_core::hostd::swap::{Checkpoint, SwapOutcome};
use moss_core::model::{DepthProfile, KeypointMatrix, Level, RunPhase, StageName};
use moss_core::runners::{Runner, ScriptedRunner};
use moss_core::sandbox::{converge_script, Stack, StackOptions};
use moss_core::store::StateKey;
use moss_core::webhook::WebhookEvent;
use moss_core::workspace::Workspace;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn argv(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn c1_converge_and_swap() -> Outcome {
    let t0 = Instant::now();
    let t = tasks();
    let stack = Stack::start(StackOptions { script: converge_script(&t), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let cfg = CliConfig::new(stack.gateway_url(), stack.socket());
    let out = dispatch(&argv("catch-up --json"), Some(&cfg));
    ensure!(out.code == 0, "catch-up: {}", out.stderr);
    let report: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    ensure!(report["chunks_admitted"] == 8 && report["batches_sealed"] == 1, "catch-up report {report}");
    let sealed = stack.service.all_batches().unwrap();
    ensure!(sealed.len() == 2 && sealed.iter().any(|b| b.chunks.len() == 8), "expected one sealed batch of 8");

    let out = dispatch(&argv("start"), Some(&cfg));
    ensure!(out.code == 0, "start: {}", out.stderr);
    let run_id = out.stdout.trim().to_string();
    stack.gateway.wait_idle();
    let run = stack.service.load_run(&run_id).unwrap();
    ensure!(run.phase == RunPhase::Converged, "run ended {:?}: {:?}", run.phase, run.failure);
    ensure!(stack.store.exists(&StateKey::BaselineMatrix { run_id: run_id.clone() }).unwrap(), "no baseline matrix");
    let it = &run.iterations[0];
    ensure!(run.iterations.len() == 1 && it.plan_rounds_used == 1 && it.code_rounds_used == 1, "rounds {it:?}");
    ensure!(it.delta.as_ref().is_some_and(|d| d.any_improved), "matrix did not improve");
    let trials = stack.store.iter_dir(&run_id, 1).unwrap().join("trials");
    let transcripts: usize = std::fs::read_dir(&trials)
        .unwrap()
        .map(|d| std::fs::read_dir(d.unwrap().path()).unwrap().count())
        .sum();
    ensure!(transcripts == 8, "{transcripts} transcripts");

    let out = dispatch(&argv("apply --json"), Some(&cfg));
    ensure!(out.code == 0, "apply: {}", out.stderr);
    let req: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    let request_id = req["request_id"].as_str().unwrap().to_string();
    let record = stack
        .wait_for(Duration::from_secs(30), || stack.daemon.swap().history(&request_id))
        .map_err(|e| e.to_string())?;
    ensure!(record.outcome == SwapOutcome::Committed, "swap {:?}", record.outcome);
    let passes: Vec<bool> = record.samples.iter().map(|s| s.pass).collect();
    ensure!(passes.len() >= 3 && passes[passes.len() - 3..].iter().all(|p| *p), "samples {passes:?}");
    wait_applied(&stack, &request_id);
    let lkg = stack.last_known_good().unwrap().unwrap();
    ensure!(Some(&lkg.image) == run.candidate_image.as_ref(), "last-known-good is not the candidate");
    let msgs = stack.gateway.messages().messages();
    let events: Vec<_> = msgs.iter().map(|m| m.event).collect();
    ensure!(events == [WebhookEvent::EvolutionConverged, WebhookEvent::ApplyComplete], "messages {events:?}");
    ensure!(msgs[1].status == "success", "apply-complete status {}", msgs[1].status);
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    stack.shutdown();
    Ok(format!("committed at sample {}, {:.1}s", passes.len() - 1, elapsed.as_secs_f64()))
}

fn c2_rollback() -> Outcome {
    let (stack, _) = converged_stack();
    let before = stack.last_known_good().unwrap().unwrap();
    stack.gateway.set_fault(true);
    let req = stack.service.apply(None).map_err(|e| e.to_string())?;
    let record = stack
        .wait_for(Duration::from_secs(30), || stack.daemon.swap().history(&req.request_id))
        .map_err(|e| e.to_string())?;
    ensure!(record.outcome == SwapOutcome::RolledBack, "outcome {:?}", record.outcome);
    ensure!(record.samples.len() == 18, "{} samples", record.samples.len());
    let interval = stack.timing.real(stack.timing.probe_interval);
    let span = (record.samples[17].ts - record.samples[0].ts).to_std().unwrap();
    let nominal = interval * 17;
    ensure!(span + interval >= nominal && span <= nominal + interval, "window took {span:?}, nominal {nominal:?}");
    wait_applied(&stack, &req.request_id);
    ensure!(stack.last_known_good().unwrap().unwrap() == before, "last-known-good changed");
    ensure!(live_images(&stack) == [before.image.image_id.clone()], "live is not the prior image");
    let apply: Vec<_> = stack
        .gateway
        .messages()
        .messages()
        .into_iter()
        .filter(|m| m.event == WebhookEvent::ApplyComplete)
        .collect();
    ensure!(apply.len() == 1 && apply[0].status == "rolled-back", "apply-complete {apply:?}");
    stack.shutdown();
    Ok(format!("18 samples over {:.2}s (nominal {:.2}s)", span.as_secs_f64(), nominal.as_secs_f64()))
}

fn c3_probe_oracle() -> Outcome {
    let t0 = Instant::now();
    let (cases, bad) = probe_mismatches(18);
    ensure!(bad == 0, "{bad} of {cases} sequences disagree");
    Ok(format!("{cases} sequences, 0 mismatches, {:.1}s", t0.elapsed().as_secs_f64()))
}

fn c4_plateau() -> Outcome {
    let t = tasks();
    let mut script = vec![baseline(&t)];
    for k in 1..=3 {
        script.extend(iteration(k, weak(&t), "NEED_MORE_WORK"));
    }
    let stack = stack(script);
    let run = run_to_end(&stack, DepthProfile::standard());
    let last = run.iterations.last().and_then(|i| i.verdict.clone());
    ensure!(run.phase == RunPhase::Converged, "phase {:?}", run.phase);
    ensure!(run.iterations.len() == 3, "{} iterations", run.iterations.len());
    ensure!(last.as_ref().is_some_and(|v| v.forced_by_plateau), "verdict {last:?}");
    ensure!(run.peak_iteration == Some(1), "peak {:?}", run.peak_iteration);
    ensure!(run.candidate_image == run.iterations[0].image, "candidate is not the peak image");
    stack.shutdown();
    Ok("forced CONVERGED at iteration 3, peak 1".into())
}

fn c5_budget() -> Outcome {
    let t = tasks();
    let mut script = vec![baseline(&t), entry(StageName::Locate, 1, None, "# Locate\n")];
    for r in 1..=3 {
        script.push(entry(StageName::Plan, 1, Some(r), "# Plan\n"));
        script.push(entry(StageName::PlanReview, 1, Some(r), reject(StageName::PlanReview)));
    }
    let stack = stack(script);
    let run = run_to_end(&stack, DepthProfile::standard());
    ensure!(run.phase == RunPhase::Failed, "phase {:?}", run.phase);
    let dir = stack.store.iter_dir(&run.run_id, 1).unwrap();
    let reviews = std::fs::read_dir(&dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("plan_review-r"))
        .count();
    ensure!(reviews == 3, "{reviews} plan reviews");
    stack.service.recover().unwrap();
    let failed = stack.gateway.messages().received();
    let id = format!("evolution-failed-{}", run.run_id);
    ensure!(stack.gateway.messages().deliveries(&id) == 1 && failed == 1, "{failed} webhook posts");
    stack.shutdown();
    Ok("3 reviews, evolution-failed delivered once".into())
}

fn c6_code_reset() -> Outcome {
    let t = tasks();
    let plan = |k| {
        vec![
            entry(StageName::Locate, k, None, "# Locate\n"),
            entry(StageName::Plan, k, Some(1), "# Plan\n"),
            entry(StageName::PlanReview, k, Some(1), approve()),
        ]
    };
    let mut script = vec![baseline(&t)];
    script.extend(plan(1));
    script.extend([
        entry(StageName::Implement, 1, Some(1), "# one\n")
            .with_file("src/round-1.txt", "first\n")
            .with_file("README.md", "changed in round 1\n"),
        entry(StageName::CodeReview, 1, Some(1), reject(StageName::CodeReview)),
        entry(StageName::Implement, 1, Some(2), "# two\n").with_file("src/round-2.txt", "second\n"),
        entry(StageName::CodeReview, 1, Some(2), approve()),
        entry(StageName::TaskEvaluate, 1, None, matrix(&t, |_, _| Level::Adequate)),
        entry(StageName::Verdict, 1, None, serde_json::json!({ "kind": "CONVERGED", "rationale": "ok" })),
    ]);
    let s = stack(script);
    let initial = head_files(s.workspace.root());
    let run = run_to_end(&s, DepthProfile::standard());
    ensure!(run.phase == RunPhase::Converged, "phase {:?}", run.phase);
    let mut files: Vec<(&str, &str)> = initial.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
    files.push(("src/round-2.txt", "second\n"));
    let head = run.iterations[0].commit_rev.clone().unwrap();
    let got = s.workspace.tree_id(&head).unwrap();
    ensure!(got == oracle_tree(&files), "approved tree {got} is not initial + round 2");
    s.shutdown();

    let mut script = vec![baseline(&t)];
    script.extend(plan(1));
    for r in 1..=3 {
        script.push(entry(StageName::Implement, 1, Some(r), "# try\n").with_file(format!("src/r{r}.txt"), "x\n"));
        script.push(entry(StageName::CodeReview, 1, Some(r), reject(StageName::CodeReview)));
    }
    let s = stack(script);
    let initial = head_files(s.workspace.root());
    let run = run_to_end(&s, DepthProfile::standard());
    ensure!(run.phase == RunPhase::Failed, "phase {:?}", run.phase);
    let files: Vec<(&str, &str)> = initial.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
    let now = s.workspace.tree_id(&s.workspace.current_rev().unwrap()).unwrap();
    ensure!(now == oracle_tree(&files), "tree after all-reject differs from loop start");
    s.shutdown();
    Ok("approved tree = initial + round 2; all-reject tree = loop start".into())
}

fn c7_autoscan() -> Outcome {
    use common::autoscan_props::*;
    let props: [(&str, fn(Case) -> Result<(), proptest::test_runner::TestCaseError>); 3] = [
        ("monotonic cursors + seal exactness", per_scan_properties),
        ("incremental = full", incremental_matches_full),
        ("one open batch across restarts", restarts_keep_one_open_batch),
    ];
    let mut done = Vec::new();
    for (name, prop) in props {
        let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
        runner.run(&case(), prop).map_err(|e| format!("{name}: {e}"))?;
        done.push(name);
    }
    Ok(format!("1000 cases each: {}", done.join("; ")))
}

fn c8_matrix() -> Outcome {
    let (cases, bad) = exhaustive_delta_mismatches();
    ensure!(bad == 0, "{bad} of {cases} exhaustive pairs disagree");
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let strategy = proptest::collection::vec(proptest::collection::vec((0usize..4, 0usize..4), 4..=7), 1..=4);
    runner
        .run(&strategy, |tasks| {
            let mut a = KeypointMatrix::new();
            let mut b = KeypointMatrix::new();
            for (t, row) in tasks.iter().enumerate() {
                for (k, (x, y)) in row.iter().enumerate() {
                    a.set(format!("t{t}"), format!("k{k}"), Level::ALL[*x]);
                    b.set(format!("t{t}"), format!("k{k}"), Level::ALL[*y]);
                }
            }
            delta_agrees(&a, &b).map_err(proptest::test_runner::TestCaseError::fail)?;
            let (task, key) = ("t0".to_string(), "k0".to_string());
            let renamed = lock_violation_detected(&a, |m| {
                let row = m.tasks.get_mut(&task).unwrap();
                let l = row.remove(&key).unwrap();
                row.insert("renamed".into(), l);
            });
            proptest::prop_assert!(renamed, "renamed keypoint was accepted");
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} exhaustive pairs + 1000 random matrices, 0 mismatches"))
}

fn c9_reference_means() -> Outcome {
    let (before, after) = reference_means();
    ensure!((before - 0.2526).abs() <= 0.00005, "before mean {before}");
    ensure!((after - 0.6100).abs() <= 0.00005, "after mean {after}");
    Ok(format!("{before:.4} -> {after:.4}"))
}

fn c10_runners() -> Outcome {
    let d = tempfile::tempdir().unwrap();
    let ws = d.path().join("ws");
    std::fs::create_dir_all(&ws).unwrap();
    let scripted: Arc<dyn Runner> = Arc::new(ScriptedRunner::new(lifecycle_entries(), d.path().join("inv")));
    lifecycle_suite(&Lifecycle { runner: scripted, workspace: &ws, pids: Box::new(Vec::new) })
        .map_err(|e| format!("scripted: {e}"))?;
    let mock = MockCli::materialize(&d.path().join("mock"), &lifecycle_entries());
    mock.orphan(1);
    mock.orphan(2);
    let sub: Arc<dyn Runner> = Arc::new(mock.runner("mock-cli"));
    lifecycle_suite(&Lifecycle { runner: sub, workspace: &ws, pids: Box::new(|| mock.pids()) })
        .map_err(|e| format!("subprocess: {e}"))?;

    let a = converge_with(None);
    let m = MockCli::materialize(&d.path().join("mock-run"), &conformance_script());
    let b = converge_with(Some(Arc::new(m.runner("mock-cli"))));
    ensure!(a.keys().eq(b.keys()), "artifact sets differ");
    if let Some(k) = a.keys().find(|k| a[*k] != b[*k]) {
        return Err(format!("{k} differs between providers"));
    }
    Ok(format!("lifecycle suite x2, {} artifacts byte-identical", a.len()))
}

fn c11_crash_recovery() -> Outcome {
    let mut seen = Vec::new();
    for cp in Checkpoint::ALL {
        let outcome = crash_and_recover(cp).map_err(|e| format!("{cp:?}: {e}"))?;
        seen.push(format!("{cp:?}={}", outcome.webhook_status()));
    }
    Ok(seen.join(" "))
}

fn c12_partition() -> Outcome {
    let s = stack(partition::script());
    let seen = partition::exercise(&s)?;
    partition::check(&seen)?;
    s.shutdown();
    let total: usize = seen.values().map(Vec::len).sum();
    Ok(format!("9 subcommands, {total} requests, each on its own transport"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("end-to-end converge and swap", c1_converge_and_swap),
        ("rollback on frozen heartbeat", c2_rollback),
        ("probe decision oracle", c3_probe_oracle),
        ("plateau forcing", c4_plateau),
        ("plan budget exhaustion", c5_budget),
        ("code-loop reset", c6_code_reset),
        ("autoscan properties", c7_autoscan),
        ("matrix algebra oracle", c8_matrix),
        ("score aggregation fixture", c9_reference_means),
        ("runner conformance", c10_runners),
        ("swap crash recovery", c11_crash_recovery),
        ("CLI transport partition", c12_partition),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("C{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label == *p || name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {label:<3} {name} ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {label:<3} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
