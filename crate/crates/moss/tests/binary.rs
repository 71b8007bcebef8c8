use std::process::{Command, Output};

fn moss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moss"))
        .args(args)
        .env_remove("MOSS_CONFIG")
        .env("MOSS_GATEWAY_URL", "http://127.0.0.1:9")
        .env("MOSS_HOSTD_SOCKET", "/nonexistent/moss.sock")
        .output()
        .unwrap()
}

#[test]
fn sandbox_generate_writes_sessions_and_sidecar() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("fixture");
    let o = moss(&["sandbox", "generate", "--scenario", "eight-weak-exchanges", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("2 sessions written"), "{stdout}");
    let jsonl = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl"))
        .count();
    assert_eq!(jsonl, 2);

    let bad = moss(&["sandbox", "generate", "--scenario", "nope", "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nope"));
}

#[test]
fn evo_exit_codes_pass_through() {
    assert_eq!(moss(&["evo", "status"]).status.code(), Some(3));
    assert_eq!(moss(&["evo", "no-such-subcommand"]).status.code(), Some(2));
    let help = moss(&["evo", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("catch-up"));
}
