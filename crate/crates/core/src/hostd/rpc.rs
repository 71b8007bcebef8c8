//! Newline-delimited JSON RPC over a Unix domain socket.
//!
//! Each line is one request `{id, op, params}`; each request gets exactly one
//! response line `{id, ok, result | error}`. Requests on one connection are
//! handled concurrently, so responses may come back out of order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::images::ImageBuilder;
use crate::error::{Error, Result};
use crate::model::ImageRef;
use crate::runners::{HandleState, InvocationPlan, Runner, RunnerHandle, RunnerSpec, StageOutput};
use crate::traffic::{TrafficLog, Transport};
use crate::trials::{IsolationReport, TrialBackend, TrialTask, TrialTranscript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcRequest {
    pub id: String,
    pub op: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcResponse {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RpcError>,
}

impl RpcResponse {
    pub fn from_result(id: String, r: Result<Value>) -> Self {
        match r {
            Ok(v) => Self { id, ok: true, result: Some(v), error: None },
            Err(e) => Self {
                id,
                ok: false,
                result: None,
                error: Some(RpcError { code: e.code().to_string(), message: e.to_string() }),
            },
        }
    }
}

pub trait RpcHandler: Send + Sync {
    fn handle(&self, op: &str, params: Value) -> Result<Value>;
}

pub fn params<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::BadRequest(e.to_string()))
}

/// Running server; dropping it does not stop it, call `shutdown`.
pub struct RpcServer {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl RpcServer {
    pub fn bind(path: impl Into<PathBuf>, handler: Arc<dyn RpcHandler>, traffic: Option<TrafficLog>) -> Result<Self> {
        let path = path.into();
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let listener = UnixListener::bind(&path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name("moss-rpc-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if flag.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let handler = handler.clone();
                            let traffic = traffic.clone();
                            std::thread::spawn(move || serve_connection(stream, handler, traffic));
                        }
                        Err(e) => tracing::warn!(error = %e, "rpc accept failed"),
                    }
                }
            })?;
        tracing::info!(socket = %path.display(), "rpc server listening");
        Ok(Self { path, stop, thread: Some(thread) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = UnixStream::connect(&self.path);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_connection(stream: UnixStream, handler: Arc<dyn RpcHandler>, traffic: Option<TrafficLog>) {
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(e) => {
            tracing::warn!(error = %e, "rpc connection setup failed");
            return;
        }
    };
    let send = |w: &Mutex<UnixStream>, resp: &RpcResponse| {
        let mut line = serde_json::to_vec(resp).expect("serializing response");
        line.push(b'\n');
        let mut w = w.lock().unwrap();
        let _ = w.write_all(&line).and_then(|_| w.flush());
    };
    let mut workers = Vec::new();
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let req: RpcRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_str).map(String::from))
                    .unwrap_or_default();
                let resp = RpcResponse::from_result(id, Err(Error::BadRequest(format!("malformed frame: {e}"))));
                send(&writer, &resp);
                break;
            }
        };
        if let Some(t) = &traffic {
            t.record(Transport::Rpc, req.op.clone());
        }
        let handler = handler.clone();
        let writer = writer.clone();
        workers.push(std::thread::spawn(move || {
            let result = handler.handle(&req.op, req.params);
            if let Err(e) = &result {
                tracing::debug!(op = %req.op, error = %e, "rpc op failed");
            }
            send(&writer, &RpcResponse::from_result(req.id, result));
        }));
    }
    for w in workers {
        let _ = w.join();
    }
    let _ = writer.lock().unwrap().shutdown(std::net::Shutdown::Both);
}

/// Opens one connection per call.
#[derive(Debug, Clone)]
pub struct RpcClient {
    path: PathBuf,
    timeout: Option<Duration>,
    next: Arc<AtomicU64>,
}

impl RpcClient {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), timeout: None, next: Arc::new(AtomicU64::new(1)) }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn transport(&self, reason: impl ToString) -> Error {
        Error::Transport { endpoint: format!("unix:{}", self.path.display()), reason: reason.to_string() }
    }

    pub fn call_raw(&self, op: &str, params: Value) -> Result<RpcResponse> {
        let id = format!("req-{}-{}", std::process::id(), self.next.fetch_add(1, Ordering::SeqCst));
        let mut stream = UnixStream::connect(&self.path).map_err(|e| self.transport(e))?;
        stream.set_read_timeout(self.timeout).map_err(|e| self.transport(e))?;
        let mut line = serde_json::to_vec(&RpcRequest { id: id.clone(), op: op.into(), params })?;
        line.push(b'\n');
        stream.write_all(&line).map_err(|e| self.transport(e))?;
        let mut reader = BufReader::new(stream);
        let mut resp = String::new();
        let n = reader.read_line(&mut resp).map_err(|e| self.transport(e))?;
        if n == 0 {
            return Err(self.transport("connection closed without a response"));
        }
        let resp: RpcResponse = serde_json::from_str(&resp).map_err(|e| self.transport(e))?;
        if resp.id != id {
            return Err(self.transport(format!("response id {} does not echo {id}", resp.id)));
        }
        Ok(resp)
    }

    pub fn call(&self, op: &str, params: Value) -> Result<Value> {
        let resp = self.call_raw(op, params)?;
        if resp.ok {
            return Ok(resp.result.unwrap_or(Value::Null));
        }
        let err = resp.error.unwrap_or(RpcError { code: "unknown".into(), message: String::new() });
        Err(remote_error(err))
    }

    pub fn call_as<T: DeserializeOwned>(&self, op: &str, params: Value) -> Result<T> {
        Ok(serde_json::from_value(self.call(op, params)?)?)
    }
}

/// Maps wire codes back onto local variants where callers branch on them.
fn remote_error(e: RpcError) -> Error {
    match e.code.as_str() {
        "timeout" => Error::Timeout,
        "cancelled" => Error::Cancelled,
        "launch_failure" => Error::LaunchFailure(e.message),
        "build_failed" => Error::BuildFailed(e.message),
        "worker_spawn_failed" => Error::WorkerSpawnFailed(e.message),
        "unknown_provider" => Error::UnknownProvider(e.message),
        "unknown_session" => Error::UnknownSession(e.message),
        "unknown_op" => Error::UnknownOp(e.message),
        _ => Error::Remote { code: e.code, message: e.message },
    }
}

/// Runner that forwards the four lifecycle calls to the daemon.
pub struct RpcRunner {
    name: String,
    client: RpcClient,
    states: Mutex<HashMap<String, HandleState>>,
}

impl RpcRunner {
    /// `provider_name` is the daemon-side provider to drive.
    pub fn new(provider_name: impl Into<String>, client: RpcClient) -> Self {
        Self { name: provider_name.into(), client, states: Mutex::default() }
    }
}

impl Runner for RpcRunner {
    fn provider_name(&self) -> &str {
        &self.name
    }

    fn prepare(&self, spec: &RunnerSpec) -> Result<InvocationPlan> {
        let mut spec = spec.clone();
        spec.provider_name = self.name.clone();
        self.client.call_as("runner.prepare", json!({ "spec": spec }))
    }

    fn launch(&self, plan: &InvocationPlan) -> Result<RunnerHandle> {
        let h: RunnerHandle = self.client.call_as("runner.launch", json!({ "plan": plan }))?;
        self.states.lock().unwrap().insert(h.invocation_id.clone(), h.state);
        Ok(h)
    }

    fn collect(&self, handle: &RunnerHandle) -> Result<StageOutput> {
        let r = self.client.call_as::<StageOutput>("runner.collect", json!({ "handle": handle }));
        let state = match &r {
            Ok(_) => HandleState::Finished,
            Err(Error::Timeout) => HandleState::TimedOut,
            Err(Error::Cancelled) => HandleState::Cancelled,
            Err(_) => HandleState::Finished,
        };
        self.states.lock().unwrap().insert(handle.invocation_id.clone(), state);
        r
    }

    fn cancel(&self, handle: &RunnerHandle) -> Result<()> {
        self.client.call("runner.cancel", json!({ "handle": handle }))?;
        let mut states = self.states.lock().unwrap();
        let s = states.entry(handle.invocation_id.clone()).or_insert(HandleState::Cancelled);
        if !s.is_terminal() {
            *s = HandleState::Cancelled;
        }
        Ok(())
    }

    fn state(&self, invocation_id: &str) -> Option<HandleState> {
        self.states.lock().unwrap().get(invocation_id).copied()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SpawnResult {
    pub worker_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExecResultDoc {
    pub transcript: TrialTranscript,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

pub struct RpcTrialBackend {
    client: RpcClient,
}

impl RpcTrialBackend {
    pub fn new(client: RpcClient) -> Self {
        Self { client }
    }
}

impl TrialBackend for RpcTrialBackend {
    fn spawn(&self, image_id: &str) -> Result<String> {
        let r: SpawnResult = self.client.call_as("trial.spawn", json!({ "image_id": image_id }))?;
        Ok(r.worker_id)
    }

    fn isolation(&self, worker_id: &str) -> Result<IsolationReport> {
        self.client.call_as("trial.isolation", json!({ "worker_id": worker_id }))
    }

    fn exec(&self, worker_id: &str, task: &TrialTask, trial_index: u32, timeout: Duration) -> Result<TrialTranscript> {
        let r: ExecResultDoc = self.client.call_as(
            "trial.exec",
            json!({
                "worker_id": worker_id,
                "task": task,
                "trial_index": trial_index,
                "timeout_ms": timeout.as_millis() as u64,
            }),
        )?;
        Ok(r.transcript)
    }

    fn teardown(&self, worker_id: &str) -> Result<()> {
        self.client.call("trial.teardown", json!({ "worker_id": worker_id }))?;
        Ok(())
    }

    fn live_workers(&self) -> Result<Vec<String>> {
        self.client.call_as("trial.list", json!({}))
    }
}

pub struct RpcImageBuilder {
    client: RpcClient,
}

impl RpcImageBuilder {
    pub fn new(client: RpcClient) -> Self {
        Self { client }
    }
}

impl ImageBuilder for RpcImageBuilder {
    fn build(&self, rev: &str) -> Result<ImageRef> {
        self.client.call_as("image.build", json!({ "rev": rev }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl RpcHandler for Echo {
        fn handle(&self, op: &str, params: Value) -> Result<Value> {
            match op {
                "echo.slow" => {
                    let ms = params["ms"].as_u64().unwrap_or(0);
                    std::thread::sleep(Duration::from_millis(ms));
                    Ok(params)
                }
                _ => Err(Error::UnknownOp(op.into())),
            }
        }
    }

    #[test]
    fn unknown_op_keeps_connection_open() {
        let d = tempfile::tempdir().unwrap();
        let server = RpcServer::bind(d.path().join("s.sock"), Arc::new(Echo), None).unwrap();
        let stream = UnixStream::connect(server.path()).unwrap();
        let mut w = stream.try_clone().unwrap();
        let mut r = BufReader::new(stream);
        let mut line = String::new();
        w.write_all(b"{\"id\":\"1\",\"op\":\"nope.x\"}\n").unwrap();
        r.read_line(&mut line).unwrap();
        let resp: RpcResponse = serde_json::from_str(&line).unwrap();
        assert!(!resp.ok);
        assert_eq!(resp.error.unwrap().code, "unknown_op");
        line.clear();
        w.write_all(b"{\"id\":\"2\",\"op\":\"echo.slow\",\"params\":{\"ms\":0}}\n").unwrap();
        r.read_line(&mut line).unwrap();
        let resp: RpcResponse = serde_json::from_str(&line).unwrap();
        assert!(resp.ok);
        assert_eq!(resp.id, "2");
        server.shutdown();
    }

    #[test]
    fn malformed_frame_gets_error_then_close() {
        let d = tempfile::tempdir().unwrap();
        let server = RpcServer::bind(d.path().join("s.sock"), Arc::new(Echo), None).unwrap();
        let stream = UnixStream::connect(server.path()).unwrap();
        let mut w = stream.try_clone().unwrap();
        let mut r = BufReader::new(stream);
        w.write_all(b"{not json\n").unwrap();
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        let resp: RpcResponse = serde_json::from_str(&line).unwrap();
        assert_eq!(resp.error.unwrap().code, "bad_request");
        line.clear();
        assert_eq!(r.read_line(&mut line).unwrap(), 0);
        server.shutdown();
    }

    #[test]
    fn pipelined_requests_all_answered() {
        let d = tempfile::tempdir().unwrap();
        let server = RpcServer::bind(d.path().join("s.sock"), Arc::new(Echo), None).unwrap();
        let stream = UnixStream::connect(server.path()).unwrap();
        let mut w = stream.try_clone().unwrap();
        for i in 0..50 {
            let line = format!("{{\"id\":\"r{i}\",\"op\":\"echo.slow\",\"params\":{{\"ms\":{}}}}}\n", (50 - i) % 7);
            w.write_all(line.as_bytes()).unwrap();
        }
        w.shutdown(std::net::Shutdown::Write).unwrap();
        let ids: std::collections::BTreeSet<String> = BufReader::new(stream)
            .lines()
            .map(|l| serde_json::from_str::<RpcResponse>(&l.unwrap()).unwrap().id)
            .collect();
        assert_eq!(ids, (0..50).map(|i| format!("r{i}")).collect());
        server.shutdown();
    }
}
