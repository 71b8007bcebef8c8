//! The `moss evo` control client. Seven subcommands talk to the gateway's
//! `/evo/*` endpoints over HTTP; `flag` and `catch-up` talk to the host
//! daemon's autoscan family over its Unix socket.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::hostd::rpc::RpcClient;

pub const ENV_GATEWAY: &str = "MOSS_GATEWAY_URL";
pub const ENV_SOCKET: &str = "MOSS_HOSTD_SOCKET";
pub const ENV_CONFIG: &str = "MOSS_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    #[default]
    Human,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliConfig {
    pub gateway_http_base: String,
    pub hostd_socket_path: PathBuf,
    #[serde(default)]
    pub output_mode: OutputMode,
}

#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    gateway_http_base: Option<String>,
    hostd_socket_path: Option<PathBuf>,
    output_mode: Option<OutputMode>,
}

impl CliConfig {
    pub fn new(gateway: impl Into<String>, socket: impl Into<PathBuf>) -> Self {
        Self {
            gateway_http_base: gateway.into().trim_end_matches('/').to_string(),
            hostd_socket_path: socket.into(),
            output_mode: OutputMode::Human,
        }
    }

    /// Config file first (explicit path, else `$MOSS_CONFIG`), then the
    /// environment variables override individual fields.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let path = file.map(Path::to_path_buf).or_else(|| std::env::var_os(ENV_CONFIG).map(PathBuf::from));
        let mut doc = ConfigFile::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(&p)?;
            doc = toml::from_str(&text).map_err(|e| Error::BadRequest(format!("{}: {e}", p.display())))?;
        }
        if let Ok(v) = std::env::var(ENV_GATEWAY) {
            doc.gateway_http_base = Some(v);
        }
        if let Some(v) = std::env::var_os(ENV_SOCKET) {
            doc.hostd_socket_path = Some(v.into());
        }
        let (Some(g), Some(s)) = (doc.gateway_http_base, doc.hostd_socket_path) else {
            return Err(Error::BadRequest(format!(
                "both transports must be configured ({ENV_GATEWAY} and {ENV_SOCKET}, or a config file)"
            )));
        };
        let mut c = Self::new(g, s);
        c.output_mode = doc.output_mode.unwrap_or_default();
        Ok(c)
    }
}

#[derive(Debug, Parser)]
#[command(name = "moss evo", about = "Control the evolution loop", disable_version_flag = true)]
struct EvoArgs {
    #[command(subcommand)]
    command: Command,
    /// Print the raw response document.
    #[arg(long, global = true)]
    json: bool,
    /// Config file (toml) with gateway_http_base and hostd_socket_path.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Show a run (the latest one by default).
    Status {
        #[arg(long)]
        run: Option<String>,
    },
    /// List batches.
    Batches,
    /// Show one batch.
    Batch {
        #[arg(long)]
        batch: String,
    },
    /// Start a run on a batch (the latest eligible one by default).
    Start {
        #[arg(long, value_parser = ["light", "standard", "deep"])]
        depth: Option<String>,
        #[arg(long)]
        batch: Option<String>,
    },
    /// Ask the active run (or the given one) to stop.
    Stop {
        #[arg(long)]
        run: Option<String>,
    },
    /// Start a fresh run on the batch of a finished run.
    Restart {
        #[arg(long)]
        run: Option<String>,
    },
    /// Request a swap to the converged candidate.
    Apply {
        #[arg(long)]
        batch: Option<String>,
    },
    /// Scan one session now.
    Flag {
        #[arg(long)]
        session: String,
    },
    /// Scan every known session.
    CatchUp,
}

/// Which transport a subcommand uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Http,
    Rpc,
}

pub const SUBCOMMANDS: [(&str, Route); 9] = [
    ("status", Route::Http),
    ("batches", Route::Http),
    ("batch", Route::Http),
    ("start", Route::Http),
    ("stop", Route::Http),
    ("restart", Route::Http),
    ("apply", Route::Http),
    ("flag", Route::Rpc),
    ("catch-up", Route::Rpc),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliOutcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CliOutcome {
    fn ok(stdout: String) -> Self {
        Self { code: EXIT_OK, stdout, stderr: String::new() }
    }

    fn err(code: i32, stderr: String) -> Self {
        Self { code, stdout: String::new(), stderr }
    }
}

enum Call {
    Get(String),
    Post(String, Value),
    Rpc(&'static str, Value),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Status { .. } => "status",
            Command::Batches => "batches",
            Command::Batch { .. } => "batch",
            Command::Start { .. } => "start",
            Command::Stop { .. } => "stop",
            Command::Restart { .. } => "restart",
            Command::Apply { .. } => "apply",
            Command::Flag { .. } => "flag",
            Command::CatchUp => "catch-up",
        }
    }

    fn call(&self) -> Call {
        fn opt(key: &str, v: &Option<String>) -> Value {
            match v {
                Some(v) => json!({ key: v }),
                None => json!({}),
            }
        }
        match self {
            Command::Status { run: Some(r) } => Call::Get(format!("/evo/status?run_id={r}")),
            Command::Status { run: None } => Call::Get("/evo/status".into()),
            Command::Batches => Call::Get("/evo/batches".into()),
            Command::Batch { batch } => Call::Get(format!("/evo/batch/{batch}")),
            Command::Start { depth, batch } => {
                let mut body = serde_json::Map::new();
                if let Some(d) = depth {
                    body.insert("depth".into(), json!(d));
                }
                if let Some(b) = batch {
                    body.insert("batch_id".into(), json!(b));
                }
                Call::Post("/evo/start".into(), Value::Object(body))
            }
            Command::Stop { run } => Call::Post("/evo/stop".into(), opt("run_id", run)),
            Command::Restart { run } => Call::Post("/evo/restart".into(), opt("run_id", run)),
            Command::Apply { batch } => Call::Post("/evo/apply".into(), opt("batch_id", batch)),
            Command::Flag { session } => Call::Rpc("autoscan.flag", json!({ "session_id": session })),
            Command::CatchUp => Call::Rpc("autoscan.catch_up", json!({})),
        }
    }
}

/// Parses and executes one `moss evo` invocation. `argv` excludes the
/// program name. Without `config`, configuration comes from `--config`,
/// `$MOSS_CONFIG` and the environment.
pub fn dispatch(argv: &[String], config: Option<&CliConfig>) -> CliOutcome {
    let args = match EvoArgs::try_parse_from(std::iter::once("moss evo".to_string()).chain(argv.iter().cloned())) {
        Ok(a) => a,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() { CliOutcome::err(EXIT_USAGE, text) } else { CliOutcome::ok(text) };
        }
    };
    let config = match config {
        Some(c) => c.clone(),
        None => match CliConfig::load(args.config.as_deref()) {
            Ok(c) => c,
            Err(e) => return CliOutcome::err(EXIT_USAGE, format!("error: {e}\n")),
        },
    };
    let mode = if args.json { OutputMode::Json } else { config.output_mode };
    let name = args.command.name();
    match execute(&config, args.command.call()) {
        Ok(doc) => CliOutcome::ok(render(name, &doc, mode)),
        Err(Failure::Transport(endpoint, reason)) => {
            CliOutcome::err(EXIT_TRANSPORT, format!("error: transport failure talking to {endpoint}: {reason}\n"))
        }
        Err(Failure::Domain(doc)) => {
            let text = match mode {
                OutputMode::Json => pretty(&doc),
                OutputMode::Human => {
                    let code = doc.pointer("/error/code").and_then(Value::as_str).unwrap_or("error");
                    let msg = doc.pointer("/error/message").and_then(Value::as_str).unwrap_or("");
                    format!("error: {code}: {msg}\n")
                }
            };
            CliOutcome::err(EXIT_DOMAIN, text)
        }
    }
}

enum Failure {
    Transport(String, String),
    Domain(Value),
}

fn error_doc(code: &str, message: &str) -> Value {
    json!({ "error": { "code": code, "message": message } })
}

fn execute(config: &CliConfig, call: Call) -> std::result::Result<Value, Failure> {
    match call {
        Call::Rpc(op, params) => {
            let client = RpcClient::new(&config.hostd_socket_path).with_timeout(Duration::from_secs(300));
            client.call(op, params).map_err(|e| match e {
                Error::Transport { endpoint, reason } => Failure::Transport(endpoint, reason),
                other => Failure::Domain(error_doc(other.code(), &other.to_string())),
            })
        }
        call => {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(60)))
                .http_status_as_error(false)
                .build()
                .into();
            let (url, response) = match call {
                Call::Get(path) => {
                    let url = format!("{}{path}", config.gateway_http_base);
                    let r = agent.get(&url).call();
                    (url, r)
                }
                Call::Post(path, body) => {
                    let url = format!("{}{path}", config.gateway_http_base);
                    let r = agent.post(&url).send_json(&body);
                    (url, r)
                }
                Call::Rpc(..) => unreachable!(),
            };
            let mut response = response.map_err(|e| Failure::Transport(url.clone(), e.to_string()))?;
            let status = response.status().as_u16();
            let text = response
                .body_mut()
                .read_to_string()
                .map_err(|e| Failure::Transport(url.clone(), e.to_string()))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| Failure::Transport(url.clone(), format!("unreadable response: {e}")))?;
            match status {
                200..=299 => Ok(doc),
                503 => Err(Failure::Transport(
                    url,
                    doc.pointer("/error/message").and_then(Value::as_str).unwrap_or("unavailable").to_string(),
                )),
                _ => Err(Failure::Domain(doc)),
            }
        }
    }
}

fn pretty(doc: &Value) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("serializing a json value");
    s.push('\n');
    s
}

fn scalar(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => "-".into(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

fn kv(rows: &[(&str, String)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
}

fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let line = |cells: Vec<String>| {
        let mut s = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(headers.iter().map(|h| h.to_string()).collect());
    for r in rows {
        out.push_str(&line(r.clone()));
    }
    out
}

/// Renders a response document. JSON mode is the document itself.
pub fn render(subcommand: &str, doc: &Value, mode: OutputMode) -> String {
    if mode == OutputMode::Json {
        return pretty(doc);
    }
    let f = |k: &str| scalar(doc.get(k));
    match subcommand {
        "status" | "stop" => {
            let mut out = kv(&[
                ("run", f("run_id")),
                ("batch", f("batch_id")),
                ("phase", f("phase")),
                ("stage", f("current_stage")),
                ("iteration", f("iteration")),
                ("depth", f("depth")),
                ("baseline score", f("baseline_score")),
                ("latest score", f("latest_score")),
                ("peak iteration", f("peak_iteration")),
                ("candidate", f("candidate_image")),
                ("failure", f("failure")),
            ]);
            let verdicts = doc.get("verdicts").and_then(Value::as_array).cloned().unwrap_or_default();
            if !verdicts.is_empty() {
                out.push('\n');
                let rows: Vec<Vec<String>> = verdicts
                    .iter()
                    .map(|v| vec![scalar(v.get("iteration")), scalar(v.get("kind")), scalar(v.get("forced_by_plateau"))])
                    .collect();
                out.push_str(&table(&["ITERATION", "VERDICT", "FORCED"], &rows));
            }
            out
        }
        "batches" => {
            let rows: Vec<Vec<String>> = doc
                .as_array()
                .map(|a| {
                    a.iter()
                        .map(|b| {
                            vec![
                                scalar(b.get("batch_id")),
                                scalar(b.get("conversation_id")),
                                scalar(b.get("state")),
                                format!("{}/{}", scalar(b.get("chunks")), scalar(b.get("seal_threshold"))),
                                scalar(b.get("created_at")),
                            ]
                        })
                        .collect()
                })
                .unwrap_or_default();
            table(&["BATCH", "CONVERSATION", "STATE", "CHUNKS", "CREATED"], &rows)
        }
        "batch" => {
            let chunks = doc.get("chunks").and_then(Value::as_array).cloned().unwrap_or_default();
            let mut out = kv(&[
                ("batch", f("batch_id")),
                ("conversation", f("conversation_id")),
                ("state", f("state")),
                ("chunks", chunks.len().to_string()),
                ("sealed at", f("sealed_at")),
            ]);
            out.push('\n');
            let rows: Vec<Vec<String>> = chunks
                .iter()
                .map(|c| {
                    let span = c.get("turn_span").and_then(Value::as_array);
                    let turns = span
                        .map(|s| format!("{}-{}", scalar(s.first()), scalar(s.get(1))))
                        .unwrap_or_else(|| "-".into());
                    let deficient = c
                        .get("keypoint_tags")
                        .and_then(Value::as_array)
                        .map(|t| {
                            t.iter()
                                .filter(|p| matches!(p.get(1).and_then(Value::as_str), Some("missing" | "weak")))
                                .count()
                        })
                        .unwrap_or(0);
                    vec![scalar(c.get("chunk_id")), scalar(c.get("session_id")), turns, deficient.to_string()]
                })
                .collect();
            out.push_str(&table(&["CHUNK", "SESSION", "TURNS", "DEFICIENT"], &rows));
            out
        }
        "start" => format!("{}\n", f("run_id")),
        "restart" => format!("{}\n", f("run_id")),
        "apply" => kv(&[
            ("request", f("request_id")),
            ("batch", f("batch_id")),
            ("candidate", doc.pointer("/candidate_image/image_id").map(|v| scalar(Some(v))).unwrap_or_else(|| "-".into())),
        ]),
        "flag" | "catch-up" => kv(&[
            ("chunks_admitted", f("chunks_admitted")),
            ("batches_sealed", f("batches_sealed")),
            ("sessions_scanned", f("sessions_scanned")),
            ("chunks_scanned", f("chunks_scanned")),
            ("malformed_records", f("malformed_records")),
            ("evaluator_failures", f("evaluator_failures")),
        ]),
        _ => pretty(doc),
    }
}
