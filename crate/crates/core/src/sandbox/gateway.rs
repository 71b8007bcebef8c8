use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{HookMapping, SystemMessageLog};
use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::hostd::probe::FileHeartbeat;
use crate::model::{DepthName, DepthProfile};
use crate::pipeline::{EvolutionService, StatusReport};
use crate::traffic::{TrafficLog, Transport};
use crate::webhook::WebhookPayload;

pub struct GatewayConfig {
    /// `host:port`; port 0 picks a free one.
    pub bind: String,
    pub hooks: HookMapping,
    /// Heartbeat file and refresh period (already scaled).
    pub heartbeat: Option<(FileHeartbeat, Duration)>,
    pub traffic: Option<TrafficLog>,
    pub clock: Arc<dyn Clock>,
}

struct State {
    service: OnceLock<Arc<EvolutionService>>,
    hooks: HookMapping,
    messages: SystemMessageLog,
    frozen: AtomicBool,
    traffic: Option<TrafficLog>,
    clock: Arc<dyn Clock>,
    drivers: Mutex<Vec<JoinHandle<()>>>,
}

/// HTTP front of the simulated substrate.
pub struct Gateway {
    server: Arc<Server>,
    url: String,
    state: Arc<State>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

#[derive(Deserialize, Default)]
struct StartBody {
    #[serde(default)]
    batch_id: Option<String>,
    #[serde(default)]
    depth: Option<String>,
}

#[derive(Deserialize, Default)]
struct RunBody {
    #[serde(default)]
    run_id: Option<String>,
}

#[derive(Deserialize, Default)]
struct ApplyBody {
    #[serde(default)]
    batch_id: Option<String>,
}

#[derive(Deserialize)]
struct FaultBody {
    frozen: bool,
}

impl Gateway {
    pub fn bind(config: GatewayConfig) -> Result<Self> {
        config.hooks.check()?;
        let server = Server::http(&config.bind)
            .map_err(|e| Error::Transport { endpoint: config.bind.clone(), reason: e.to_string() })?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Transport { endpoint: config.bind.clone(), reason: "not an ip listener".into() })?;
        let server = Arc::new(server);
        let state = Arc::new(State {
            service: OnceLock::new(),
            hooks: config.hooks,
            messages: SystemMessageLog::default(),
            frozen: AtomicBool::new(false),
            traffic: config.traffic,
            clock: config.clock,
            drivers: Mutex::default(),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        let (srv, st) = (server.clone(), state.clone());
        threads.push(std::thread::Builder::new().name("moss-gateway".into()).spawn(move || {
            for req in srv.incoming_requests() {
                let st = st.clone();
                let spawned = std::thread::Builder::new()
                    .name("moss-gateway-req".into())
                    .spawn(move || handle(&st, req));
                if let Err(e) = spawned {
                    tracing::error!(error = %e, "could not spawn request thread");
                }
            }
        })?);

        if let Some((hb, period)) = config.heartbeat {
            let (st, flag) = (state.clone(), stop.clone());
            threads.push(std::thread::Builder::new().name("moss-heartbeat".into()).spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    if !st.frozen.load(Ordering::SeqCst) {
                        if let Err(e) = hb.write(st.clock.now()) {
                            tracing::warn!(error = %e, "heartbeat write failed");
                        }
                    }
                    sleep_unless(&flag, period);
                }
            })?);
        }

        Ok(Self { server, url: format!("http://{addr}"), state, stop, threads })
    }

    /// Connects the `/evo/*` routes to the pipeline. Until then they answer 503.
    pub fn attach(&self, service: Arc<EvolutionService>) {
        let _ = self.state.service.set(service);
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn hook_url(&self) -> String {
        format!("{}/hooks/moss", self.url)
    }

    pub fn messages(&self) -> &SystemMessageLog {
        &self.state.messages
    }

    pub fn set_fault(&self, frozen: bool) {
        self.state.frozen.store(frozen, Ordering::SeqCst);
    }

    /// Joins every drive thread started through `/evo/start` or `/evo/restart`.
    pub fn wait_idle(&self) {
        loop {
            let handles: Vec<_> = std::mem::take(&mut *self.state.drivers.lock().unwrap());
            if handles.is_empty() {
                return;
            }
            for h in handles {
                let _ = h.join();
            }
        }
    }

    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop_all();
    }
}

fn sleep_unless(flag: &AtomicBool, d: Duration) {
    let step = Duration::from_millis(10);
    let mut left = d;
    while !left.is_zero() && !flag.load(Ordering::SeqCst) {
        let s = left.min(step);
        std::thread::sleep(s);
        left -= s;
    }
}

fn handle(state: &State, mut req: Request) {
    let method = req.method().clone();
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((url.as_str(), ""));
    let mut body = Vec::new();
    let result = req
        .as_reader()
        .read_to_end(&mut body)
        .map_err(Error::from)
        .and_then(|_| route(state, &method, path, query, &body));
    let (status, doc) = match result {
        Ok(v) => (200, v),
        Err(e) => {
            tracing::debug!(%path, error = %e, "request failed");
            (status_for(&e), json!({ "error": { "code": e.code(), "message": e.to_string() } }))
        }
    };
    let mut text = serde_json::to_string_pretty(&doc).unwrap_or_else(|_| "{}".into());
    text.push('\n');
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(Response::from_string(text).with_status_code(status).with_header(header));
}

fn status_for(e: &Error) -> u16 {
    match e {
        Error::BadRequest(_) | Error::Json(_) => 400,
        Error::UnknownBatch(_) | Error::UnknownRun(_) | Error::UnknownOp(_) => 404,
        Error::Transport { .. } => 503,
        e if e.is_domain() => 409,
        _ => 500,
    }
}

fn body_or_default<T: for<'de> Deserialize<'de> + Default>(body: &[u8]) -> Result<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| Error::BadRequest(e.to_string()))
}

fn query_param<'a>(query: &'a str, name: &str) -> Option<&'a str> {
    query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
        .filter(|v| !v.is_empty())
}

fn route(state: &State, method: &Method, path: &str, query: &str, body: &[u8]) -> Result<Value> {
    if path.starts_with("/evo/") {
        if let Some(t) = &state.traffic {
            t.record(Transport::Http, format!("{method} {path}"));
        }
        let service = state.service.get().ok_or_else(|| Error::Transport {
            endpoint: path.to_string(),
            reason: "pipeline not attached".into(),
        })?;
        return evo(state, service, method, path, query, body);
    }
    match (method, path) {
        (Method::Post, "/hooks/moss") => {
            let payload: WebhookPayload =
                serde_json::from_slice(body).map_err(|e| Error::BadRequest(e.to_string()))?;
            let fresh = state.messages.deliver(&state.hooks, &payload, state.clock.now())?;
            Ok(json!({ "accepted": true, "duplicate": !fresh }))
        }
        (Method::Post, "/admin/fault") => {
            let f: FaultBody = serde_json::from_slice(body).map_err(|e| Error::BadRequest(e.to_string()))?;
            state.frozen.store(f.frozen, Ordering::SeqCst);
            Ok(json!({ "frozen": f.frozen }))
        }
        (Method::Get, "/admin/fault") => Ok(json!({ "frozen": state.frozen.load(Ordering::SeqCst) })),
        (Method::Get, "/admin/messages") => Ok(serde_json::to_value(state.messages.messages())?),
        _ => Err(Error::UnknownOp(format!("{method} {path}"))),
    }
}

fn spawn_drive(state: &State, service: &Arc<EvolutionService>, run_id: &str) -> Result<()> {
    let (svc, id) = (service.clone(), run_id.to_string());
    let h = std::thread::Builder::new().name("moss-drive".into()).spawn(move || match svc.drive(&id) {
        Ok(run) => tracing::info!(run = %id, phase = %run.phase, "run finished"),
        Err(e) => tracing::error!(run = %id, error = %e, "run aborted"),
    })?;
    state.drivers.lock().unwrap().push(h);
    Ok(())
}

fn evo(
    state: &State,
    service: &Arc<EvolutionService>,
    method: &Method,
    path: &str,
    query: &str,
    body: &[u8],
) -> Result<Value> {
    match (method, path) {
        (Method::Get, "/evo/status") => Ok(serde_json::to_value(service.status(query_param(query, "run_id"))?)?),
        (Method::Get, "/evo/batches") => Ok(serde_json::to_value(service.batches()?)?),
        (Method::Get, p) if p.starts_with("/evo/batch/") => {
            let id = &p["/evo/batch/".len()..];
            Ok(serde_json::to_value(service.batch(id)?)?)
        }
        (Method::Post, "/evo/start") => {
            let b: StartBody = body_or_default(body)?;
            let depth = match b.depth.as_deref() {
                Some(d) => d.parse::<DepthName>().map_err(|_| Error::BadRequest(format!("unknown depth {d:?}")))?,
                None => DepthName::Standard,
            };
            let run_id = service.start_run(b.batch_id.as_deref(), DepthProfile::preset(depth))?;
            spawn_drive(state, service, &run_id)?;
            let run = service.load_run(&run_id)?;
            Ok(json!({ "run_id": run.run_id, "batch_id": run.batch_id, "depth": depth }))
        }
        (Method::Post, "/evo/stop") => {
            let b: RunBody = body_or_default(body)?;
            let run_id = match b.run_id {
                Some(id) => id,
                None => service.active_run()?.map(|r| r.run_id).ok_or_else(|| Error::RunNotActive("(none)".into()))?,
            };
            let run = service.stop(&run_id)?;
            Ok(serde_json::to_value(StatusReport::of(&run))?)
        }
        (Method::Post, "/evo/restart") => {
            let b: RunBody = body_or_default(body)?;
            let old = match b.run_id {
                Some(id) => id,
                None => service.status(None)?.run_id,
            };
            let run_id = service.restart(&old)?;
            spawn_drive(state, service, &run_id)?;
            Ok(json!({ "run_id": run_id, "restarted_from": old }))
        }
        (Method::Post, "/evo/apply") => {
            let b: ApplyBody = body_or_default(body)?;
            Ok(serde_json::to_value(service.apply(b.batch_id.as_deref())?)?)
        }
        _ => Err(Error::UnknownOp(format!("{method} {path}"))),
    }
}
