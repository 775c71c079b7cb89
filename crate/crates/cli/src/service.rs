//! HTTP front end. Handlers never execute generation work themselves: they
//! enqueue submissions to a single scheduler thread that owns the pipeline
//! runner, and read results from a shared store the scheduler publishes
//! into. The scheduler collects submissions for a short admission window so
//! queries that arrive together run as one batch and overlap on the
//! resource slots.

use crate::config::Config;
use crate::{CliError, Session};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fanout_core::engine::Mode;
use fanout_core::exec::{Executor, JobId, SimExecutor, ThreadExecutor, TimelineEvent};
use fanout_core::pipeline::{PipelineRunner, QuerySpec};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

/// A running service; the threads behind it are detached.
pub struct ServiceHandle {
    pub addr: SocketAddr,
}

impl ServiceHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

/// Everything the HTTP layer knows about one job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub query_id: String,
    pub mode: String,
    /// "running" from admission until its batch finishes, then "done" or
    /// "failed".
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub prompt_tokens: usize,
    pub tokens: usize,
    pub elapsed: f64,
    /// First and last activity on the shared logical clock; jobs whose
    /// windows intersect genuinely shared the machine.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_start: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeline: Option<Vec<TimelineEvent<f64>>>,
}

/// Finished jobs, capped. The most recently touched entries stay in
/// memory; evicted ones are written to the spill dir (when configured) and
/// served from there on later reads. Unfinished jobs are never evicted.
pub struct JobStore {
    cap: usize,
    spill_dir: Option<PathBuf>,
    map: HashMap<JobId, JobRecord>,
    touch_order: VecDeque<JobId>,
}

impl JobStore {
    fn new(cap: usize, spill_dir: Option<PathBuf>) -> Self {
        JobStore {
            cap: cap.max(1),
            spill_dir,
            map: HashMap::new(),
            touch_order: VecDeque::new(),
        }
    }

    fn touch(&mut self, id: JobId) {
        self.touch_order.retain(|&x| x != id);
        self.touch_order.push_back(id);
    }

    fn put(&mut self, record: JobRecord) {
        let id = record.job_id;
        self.map.insert(id, record);
        self.touch(id);
        while self.map.len() > self.cap {
            // Oldest finished entry goes first; running jobs are pinned.
            let Some(pos) = self
                .touch_order
                .iter()
                .position(|id| self.map.get(id).is_some_and(|r| r.status != "running"))
            else {
                break;
            };
            let evicted = self.touch_order.remove(pos).expect("position valid");
            let record = self.map.remove(&evicted).expect("map and order agree");
            if let Some(dir) = &self.spill_dir {
                let _ = std::fs::create_dir_all(dir);
                let path = dir.join(format!("{evicted}.json"));
                if let Ok(text) = serde_json::to_string(&record) {
                    let _ = std::fs::write(path, text);
                }
            }
        }
    }

    fn get(&mut self, id: JobId) -> Option<JobRecord> {
        if let Some(r) = self.map.get(&id).cloned() {
            self.touch(id);
            return Some(r);
        }
        let dir = self.spill_dir.as_ref()?;
        let text = std::fs::read_to_string(dir.join(format!("{id}.json"))).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn records(&self) -> impl Iterator<Item = &JobRecord> {
        self.map.values()
    }
}

/// A validated submission on its way to the scheduler thread.
struct SubmitMsg {
    query: String,
    query_id: Option<String>,
    mode: Mode,
    seed: u64,
    max_tokens: Option<usize>,
    script_prefix: Option<String>,
    reply: tokio::sync::oneshot::Sender<Result<JobId, String>>,
}

struct ServiceState {
    tx: Mutex<mpsc::Sender<SubmitMsg>>,
    store: Arc<Mutex<JobStore>>,
    default_mode: Mode,
}

/// Owns the runner. Each round admits every submission that arrived within
/// the window, runs the admitted batch to completion, and publishes the
/// newly finished jobs. The runner lives for the whole service so job ids
/// and the logical clock stay monotonic across rounds.
fn scheduler_loop<E: Executor<f64>>(
    mut runner: PipelineRunner<f64, E>,
    rx: mpsc::Receiver<SubmitMsg>,
    store: Arc<Mutex<JobStore>>,
    default_seed: u64,
    window: Duration,
) {
    let mut published: BTreeSet<JobId> = BTreeSet::new();
    let mut seq: u64 = 0;
    loop {
        let first = match rx.recv_timeout(window) {
            Ok(msg) => msg,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        let mut batch = vec![first];
        std::thread::sleep(window); // let concurrent submitters join the round
        while let Ok(msg) = rx.try_recv() {
            batch.push(msg);
        }

        let mut admitted = false;
        for msg in batch {
            seq += 1;
            let query_id = msg
                .query_id
                .clone()
                .unwrap_or_else(|| format!("job-{seq}"));
            let mut spec = QuerySpec::new(&query_id, &msg.query)
                .with_mode(msg.mode)
                .with_seed(if msg.seed == 0 { default_seed } else { msg.seed });
            if let Some(n) = msg.max_tokens {
                spec = spec.with_max_tokens(n);
            }
            if let Some(p) = &msg.script_prefix {
                spec = spec.with_script_prefix(p);
            }
            match runner.submit(spec) {
                Ok(id) => {
                    admitted = true;
                    store.lock().expect("store lock").put(JobRecord {
                        job_id: id,
                        query_id,
                        mode: msg.mode.as_str().to_string(),
                        status: "running".to_string(),
                        answer: None,
                        error: None,
                        warnings: Vec::new(),
                        prompt_tokens: 0,
                        tokens: 0,
                        elapsed: 0.0,
                        first_start: None,
                        last_end: None,
                        timeline: None,
                    });
                    let _ = msg.reply.send(Ok(id));
                }
                Err(e) => {
                    let _ = msg.reply.send(Err(e.to_string()));
                }
            }
        }
        if !admitted {
            continue;
        }

        runner.run();

        let mut store = store.lock().expect("store lock");
        for job in runner.jobs() {
            if !job.is_finished() || published.contains(&job.id) {
                continue;
            }
            published.insert(job.id);
            let first_start = job
                .timeline
                .iter()
                .map(|e| e.start)
                .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
            let last_end = job
                .timeline
                .iter()
                .map(|e| e.end)
                .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
            store.put(JobRecord {
                job_id: job.id,
                query_id: job.spec.query_id.clone(),
                mode: job.spec.mode.as_str().to_string(),
                status: if job.error.is_some() { "failed" } else { "done" }.to_string(),
                answer: job.answer.clone(),
                error: job.error.as_ref().map(|e| e.to_string()),
                warnings: job.warnings.clone(),
                prompt_tokens: job.prompt_tokens,
                tokens: job.output_tokens,
                elapsed: job.finished_at.unwrap_or(job.submitted_at) - job.submitted_at,
                first_start,
                last_end,
                timeline: Some(job.timeline.clone()),
            });
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitBody {
    query: String,
    query_id: Option<String>,
    mode: Option<String>,
    seed: Option<u64>,
    max_tokens: Option<usize>,
    script_prefix: Option<String>,
}

fn json_error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn handle_submit(State(state): State<Arc<ServiceState>>, body: Bytes) -> Response {
    let body: SubmitBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return json_error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    if body.query.trim().is_empty() {
        return json_error(StatusCode::BAD_REQUEST, "query must not be empty");
    }
    let mode = match &body.mode {
        None => state.default_mode,
        Some(m) => match m.parse() {
            Ok(m) => m,
            Err(e) => return json_error(StatusCode::BAD_REQUEST, e),
        },
    };
    let (reply, wait) = tokio::sync::oneshot::channel();
    let msg = SubmitMsg {
        query: body.query,
        query_id: body.query_id,
        mode,
        seed: body.seed.unwrap_or(0),
        max_tokens: body.max_tokens,
        script_prefix: body.script_prefix,
        reply,
    };
    if state.tx.lock().expect("sender lock").send(msg).is_err() {
        return json_error(StatusCode::SERVICE_UNAVAILABLE, "scheduler is gone");
    }
    match wait.await {
        Ok(Ok(id)) => (StatusCode::OK, Json(serde_json::json!({ "job_id": id }))).into_response(),
        Ok(Err(e)) => json_error(StatusCode::SERVICE_UNAVAILABLE, e),
        Err(_) => json_error(StatusCode::SERVICE_UNAVAILABLE, "scheduler is gone"),
    }
}

async fn handle_status(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<JobId>,
) -> Response {
    let record = state.store.lock().expect("store lock").get(id);
    match record {
        Some(r) => (StatusCode::OK, Json(r)).into_response(),
        None => json_error(StatusCode::NOT_FOUND, format!("no job {id}")),
    }
}

async fn handle_metrics(State(state): State<Arc<ServiceState>>) -> Response {
    let store = state.store.lock().expect("store lock");
    let mut jobs: Vec<serde_json::Value> = Vec::new();
    let (mut done, mut failed, mut running) = (0u64, 0u64, 0u64);
    let (mut tokens, mut prompt_tokens) = (0u64, 0u64);
    let mut elapsed = 0.0f64;
    let mut makespan = 0.0f64;
    for r in store.records() {
        match r.status.as_str() {
            "done" => done += 1,
            "failed" => failed += 1,
            _ => {
                running += 1;
                continue;
            }
        }
        tokens += r.tokens as u64;
        prompt_tokens += r.prompt_tokens as u64;
        elapsed += r.elapsed;
        if let Some(end) = r.last_end {
            makespan = makespan.max(end);
        }
        jobs.push(serde_json::json!({
            "job_id": r.job_id,
            "query_id": r.query_id,
            "mode": r.mode,
            "status": r.status,
            "tokens": r.tokens,
            "prompt_tokens": r.prompt_tokens,
            "elapsed": r.elapsed,
            "first_start": r.first_start,
            "last_end": r.last_end,
        }));
    }
    jobs.sort_by_key(|j| j["job_id"].as_u64());
    let body = serde_json::json!({
        "jobs": jobs,
        "totals": {
            "completed": done,
            "failed": failed,
            "running": running,
            "tokens": tokens,
            "prompt_tokens": prompt_tokens,
            "elapsed": elapsed,
        },
        "makespan": makespan,
    });
    (StatusCode::OK, Json(body)).into_response()
}

async fn handle_health() -> &'static str {
    "ok"
}

fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(handle_health))
        .route("/v1/query", post(handle_submit))
        .route("/v1/query/{id}", get(handle_status))
        .route("/v1/metrics", get(handle_metrics))
        .with_state(state)
}

/// Builds the session, starts the scheduler and the HTTP listener, and
/// returns once the socket is bound. Threads are detached; the handle only
/// reports the address.
pub fn spawn_service(cfg: &Config) -> Result<ServiceHandle, CliError> {
    let session = Session::from_config(cfg)?;
    let store = Arc::new(Mutex::new(JobStore::new(
        cfg.service.result_cache,
        cfg.service.spill_dir.clone(),
    )));
    let (tx, rx) = mpsc::channel();

    let window = Duration::from_millis(cfg.service.admission_window_ms);
    let queue_bound = cfg.service.queue_bound;
    let seed = cfg.seed;
    let sched_store = Arc::clone(&store);
    std::thread::Builder::new()
        .name("fanout-scheduler".to_string())
        .spawn(move || {
            let Session {
                backend,
                caps,
                prompt,
                retriever,
                search_time,
                wall_clock,
            } = session;
            if wall_clock {
                let mut runner = PipelineRunner::new(ThreadExecutor::new(backend), caps)
                    .with_prompt(prompt)
                    .with_queue_bound(queue_bound);
                if let Some(r) = retriever {
                    runner = runner.with_retriever(r);
                }
                scheduler_loop(runner, rx, sched_store, seed, window);
            } else {
                let mut runner =
                    PipelineRunner::new(SimExecutor::new(backend, search_time), caps)
                        .with_prompt(prompt)
                        .with_queue_bound(queue_bound);
                if let Some(r) = retriever {
                    runner = runner.with_retriever(r);
                }
                scheduler_loop(runner, rx, sched_store, seed, window);
            }
        })
        .map_err(|e| CliError::Config(e.into()))?;

    let listener = std::net::TcpListener::bind(&cfg.service.bind)
        .map_err(|e| CliError::Config(anyhow::anyhow!("cannot bind {}: {e}", cfg.service.bind)))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| CliError::Config(e.into()))?;
    let addr = listener.local_addr().map_err(|e| CliError::Config(e.into()))?;

    let state = Arc::new(ServiceState {
        tx: Mutex::new(tx),
        store,
        default_mode: cfg.run_mode(),
    });
    let app = router(state);
    std::thread::Builder::new()
        .name("fanout-http".to_string())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .expect("tokio runtime");
            rt.block_on(async move {
                let listener =
                    tokio::net::TcpListener::from_std(listener).expect("listener registers");
                axum::serve(listener, app).await.expect("http server");
            });
        })
        .map_err(|e| CliError::Config(e.into()))?;

    Ok(ServiceHandle { addr })
}

/// Foreground `serve` command: spawns the service and parks forever.
pub fn serve(cfg: &Config) -> Result<(), CliError> {
    let handle = spawn_service(cfg)?;
    log::info!("listening on {}", handle.base_url());
    loop {
        std::thread::park();
    }
}
