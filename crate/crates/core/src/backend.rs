//! Generation backends: a deterministic simulator and a streaming HTTP client.
//!
//! Everything above this module treats generation as a single call that
//! reports its two phases separately: a compute-bound *prefill* (prompt
//! ingestion, ends at the first output token) and a bandwidth-bound *decode*
//! (everything after). Schedulers gate on those phase boundaries, so the
//! backend surfaces them both in the returned durations and as stream
//! events while the call runs.
//!
//! [`SimBackend`] is pure: durations come from a linear cost model and the
//! text from scripts or a seeded synthesizer, so a whole run is reproducible
//! byte for byte. [`RemoteBackend`] speaks the server-sent-events dialect of
//! `/v1/chat/completions` endpoints and measures real phase times.

use crate::num::Scalar;
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Splits text into tokens; one token per whitespace-separated word. Used
/// consistently for every token count in the system.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn count_tokens(text: &str) -> usize {
    tokenize(text).count()
}

/// Which phase the scheduler expects to dominate this call. Purely advisory
/// for backends; the simulator's clock and real endpoints both measure the
/// actual split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseHint {
    Prefill,
    Decode,
    Whole,
}

/// Script keys with this suffix ask the simulator for a decomposition in the
/// key-point wire format instead of plain filler text.
pub const KEYPOINT_KEY_SUFFIX: &str = "::keypoints";

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub prompt: String,
    /// Output budget; `None` accepts the backend default.
    pub max_tokens: Option<usize>,
    pub phase_hint: PhaseHint,
    /// Ask for incremental delivery. The phase split is only measurable on
    /// streamed calls; non-streaming calls report everything as prefill.
    pub stream: bool,
    /// Stable handle for scripted outputs, independent of prompt wording.
    pub script_key: Option<String>,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_tokens: None,
            phase_hint: PhaseHint::Whole,
            stream: true,
            script_key: None,
            seed: 0,
        }
    }

    pub fn with_phase(mut self, hint: PhaseHint) -> Self {
        self.phase_hint = hint;
        self
    }

    pub fn with_stream(mut self, stream: bool) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_script_key(mut self, key: impl Into<String>) -> Self {
        self.script_key = Some(key.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_tokens(mut self, n: usize) -> Self {
        self.max_tokens = Some(n);
        self
    }

    /// Requests must carry a non-empty prompt and a positive token budget.
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest(
                "prompt must be non-empty".into(),
            ));
        }
        if self.max_tokens == Some(0) {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Completed generation with its phase split.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult<S: Scalar> {
    pub text: String,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    /// Time from dispatch to the first output token.
    pub prefill_time: S,
    /// Time from the first output token to completion.
    pub decode_time: S,
    /// Offsets of each streamed chunk from dispatch, when the backend can
    /// observe them (real streams can; the simulator reports none).
    pub token_times: Option<Vec<S>>,
}

/// Mid-call notifications, in order: one `FirstToken`, then `Text` chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamEvent<'a> {
    /// Prefill finished; decode begins.
    FirstToken,
    /// A chunk of output text (chunk size is the backend's choice).
    Text(&'a str),
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("no scripted output for request key {0:?}")]
    UnscriptedPrompt(String),
    #[error("generation timed out: {0}")]
    Timeout(String),
    #[error("endpoint returned status {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("stream interrupted: {0}")]
    StreamInterrupted(String),
    #[error("endpoint request failed: {0}")]
    Transport(reqwest::Error),
}

impl From<reqwest::Error> for BackendError {
    fn from(e: reqwest::Error) -> Self {
        if e.is_timeout() {
            BackendError::Timeout(e.to_string())
        } else {
            BackendError::Transport(e)
        }
    }
}

/// One generation call. `events` fires while the call runs; see
/// [`StreamEvent`] for the sequence.
pub trait GenerationBackend<S: Scalar>: Send + Sync {
    fn generate(
        &self,
        req: &GenerationRequest,
        events: &mut dyn FnMut(StreamEvent),
    ) -> Result<GenerationResult<S>, BackendError>;
}

/// Linear timing model for simulated generation.
///
/// Prefill costs `prefill_base + prefill_per_token * prompt_tokens`, decode
/// costs `decode_per_token * output_tokens`, and one retrieval pass costs a
/// flat `search_cost`. Units are abstract seconds on the simulated clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimCostModel<S: Scalar> {
    pub prefill_base: S,
    pub prefill_per_token: S,
    pub decode_per_token: S,
    pub search_cost: S,
}

impl<S: Scalar> Default for SimCostModel<S> {
    fn default() -> Self {
        SimCostModel {
            prefill_base: S::from_f64_lossy(2.0),
            prefill_per_token: S::from_f64_lossy(0.01),
            decode_per_token: S::from_f64_lossy(1.0),
            search_cost: S::from_f64_lossy(5.0),
        }
    }
}

impl<S: Scalar> SimCostModel<S> {
    pub fn prefill_time(&self, prompt_tokens: usize) -> S {
        self.prefill_base + self.prefill_per_token * S::from_usize_lossy(prompt_tokens)
    }

    pub fn decode_time(&self, output_tokens: usize) -> S {
        self.decode_per_token * S::from_usize_lossy(output_tokens)
    }
}

/// Deterministic simulated backend.
///
/// Output text comes from, in priority order: a script registered under the
/// request's `script_key`, a script registered for the exact prompt, or the
/// seeded synthesizer. Keys ending in [`KEYPOINT_KEY_SUFFIX`] synthesize a
/// decomposition instead of filler prose. `strict` turns the synthesizer
/// fallback into [`BackendError::UnscriptedPrompt`] so tests can prove every
/// call was accounted for.
#[derive(Debug, Clone)]
pub struct SimBackend<S: Scalar> {
    cost: SimCostModel<S>,
    scripts: HashMap<String, String>,
    prompt_scripts: HashMap<String, String>,
    default_output_tokens: usize,
    strict: bool,
}

impl<S: Scalar> Default for SimBackend<S> {
    fn default() -> Self {
        Self::new(SimCostModel::default())
    }
}

impl<S: Scalar> SimBackend<S> {
    pub fn new(cost: SimCostModel<S>) -> Self {
        SimBackend {
            cost,
            scripts: HashMap::new(),
            prompt_scripts: HashMap::new(),
            default_output_tokens: 64,
            strict: false,
        }
    }

    pub fn cost_model(&self) -> &SimCostModel<S> {
        &self.cost
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn set_default_output_tokens(&mut self, n: usize) {
        self.default_output_tokens = n;
    }

    /// Registers the output for a request key.
    pub fn script(&mut self, key: impl Into<String>, output: impl Into<String>) {
        self.scripts.insert(key.into(), output.into());
    }

    /// Registers the output for one exact prompt.
    pub fn prompt_script(&mut self, prompt: impl Into<String>, output: impl Into<String>) {
        self.prompt_scripts.insert(prompt.into(), output.into());
    }

    fn output_for(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        if let Some(key) = &req.script_key {
            if let Some(text) = self.scripts.get(key) {
                return Ok(text.clone());
            }
        }
        if let Some(text) = self.prompt_scripts.get(&req.prompt) {
            return Ok(text.clone());
        }
        if self.strict {
            return Err(BackendError::UnscriptedPrompt(
                req.script_key
                    .clone()
                    .unwrap_or_else(|| truncate_for_error(&req.prompt)),
            ));
        }
        let wants_keypoints = req
            .script_key
            .as_deref()
            .is_some_and(|k| k.ends_with(KEYPOINT_KEY_SUFFIX));
        if wants_keypoints {
            Ok(synthesize_decomposition(&req.prompt, req.seed))
        } else {
            let n = req.max_tokens.unwrap_or(self.default_output_tokens);
            Ok(synthesize_text(&req.prompt, req.seed, n))
        }
    }
}

impl<S: Scalar> GenerationBackend<S> for SimBackend<S> {
    fn generate(
        &self,
        req: &GenerationRequest,
        events: &mut dyn FnMut(StreamEvent),
    ) -> Result<GenerationResult<S>, BackendError> {
        req.validate()?;
        let text = self.output_for(req)?;
        events(StreamEvent::FirstToken);
        events(StreamEvent::Text(&text));
        let prompt_tokens = count_tokens(&req.prompt);
        let output_tokens = count_tokens(&text);
        Ok(GenerationResult {
            prompt_tokens,
            output_tokens,
            prefill_time: self.cost.prefill_time(prompt_tokens),
            decode_time: self.cost.decode_time(output_tokens),
            token_times: None,
            text,
        })
    }
}

fn truncate_for_error(prompt: &str) -> String {
    let head: String = prompt.chars().take(40).collect();
    if head.len() < prompt.len() {
        format!("{head}…")
    } else {
        head
    }
}

// --- seeded synthesizer ----------------------------------------------------

const VOCAB: &[&str] = &[
    "the", "a", "this", "each", "analysis", "result", "step", "value", "model", "shows",
    "suggests", "yields", "holds", "follows", "because", "therefore", "first", "then", "finally",
    "overall", "plan", "budget", "phase", "check", "balance", "term", "bound", "rate", "cost",
    "path", "graph", "point", "stage", "wave", "batch", "query", "answer", "section", "note",
    "careful", "stable", "direct", "simple", "clear", "key", "main", "minor", "extra", "final",
];

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn text_state(prompt: &str, seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in prompt.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Deterministic filler text: a pure function of (prompt, seed), `n` words.
pub fn synthesize_text(prompt: &str, seed: u64, n: usize) -> String {
    let mut state = text_state(prompt, seed);
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let w = VOCAB[(splitmix64(&mut state) % VOCAB.len() as u64) as usize];
        words.push(w);
    }
    words.join(" ")
}

/// Deterministic four-point decomposition in the wire format.
///
/// The dependency shape rotates with the hash so unscripted runs still
/// exercise every edge kind; titles are synthesized two-word phrases.
pub fn synthesize_decomposition(prompt: &str, seed: u64) -> String {
    let mut state = text_state(prompt, seed);
    let phrase = |state: &mut u64| {
        let a = VOCAB[(splitmix64(state) % VOCAB.len() as u64) as usize];
        let b = VOCAB[(splitmix64(state) % VOCAB.len() as u64) as usize];
        format!("{a} {b}")
    };
    let p: Vec<String> = (0..4).map(|_| phrase(&mut state)).collect();
    let shape = splitmix64(&mut state) % 3;
    match shape {
        0 => format!(
            r#"[{{"id":1,"point":"{}","deps":[]}},{{"id":2,"point":"{}","deps":[{{"on":1,"kind":"contextual"}}]}},{{"id":3,"point":"{}","deps":[{{"on":1,"kind":"contextual"}}]}},{{"id":4,"point":"{}","deps":[{{"on":2,"kind":"dependent"}},{{"on":3,"kind":"dependent"}}]}}]"#,
            p[0], p[1], p[2], p[3]
        ),
        1 => format!(
            r#"[{{"id":1,"point":"{}","deps":[]}},{{"id":2,"point":"{}","deps":[{{"on":1,"kind":"contextual"}}]}},{{"id":3,"point":"{}","deps":[]}},{{"id":4,"point":"{}","deps":[{{"on":3,"kind":"dependent"}}]}}]"#,
            p[0], p[1], p[2], p[3]
        ),
        _ => format!(
            r#"[{{"id":1,"point":"{}","deps":[]}},{{"id":2,"point":"{}","deps":[{{"on":1,"kind":"dependent"}}]}},{{"id":3,"point":"{}","deps":[{{"on":2,"kind":"contextual"}}]}},{{"id":4,"point":"{}","deps":[{{"on":1,"kind":"none"}}]}}]"#,
            p[0], p[1], p[2], p[3]
        ),
    }
}

// --- remote backend ---------------------------------------------------------

/// Connection settings for an OpenAI-style streaming chat endpoint.
#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL up to but excluding `/v1/...`, e.g. `http://localhost:8000`.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8000".to_string(),
            model: "default".to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
            max_retries: 2,
        }
    }
}

/// Chat-completions client with real phase timing.
///
/// Streamed calls measure prefill as dispatch→first content delta and decode
/// as first delta→stream end; both land in the same [`GenerationResult`]
/// fields the simulator fills, so schedulers cannot tell the backends apart.
/// Non-streaming calls return the same text but cannot observe the phase
/// boundary, so the whole latency is reported as prefill.
#[derive(Debug)]
pub struct RemoteBackend<S: Scalar> {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    _scalar: std::marker::PhantomData<S>,
}

impl<S: Scalar> RemoteBackend<S> {
    pub fn new(cfg: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()?;
        Ok(RemoteBackend {
            cfg,
            client,
            _scalar: std::marker::PhantomData,
        })
    }

    fn request_body(&self, req: &GenerationRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "stream": req.stream,
        });
        if let Some(n) = req.max_tokens {
            body["max_tokens"] = serde_json::json!(n);
        }
        body
    }

    fn post(&self, req: &GenerationRequest) -> Result<reqwest::blocking::Response, BackendError> {
        let url = format!("{}/v1/chat/completions", self.cfg.base_url);
        let mut http = self.client.post(&url).json(&self.request_body(req));
        if let Some(key) = &self.cfg.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http.send()?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::HttpError {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        Ok(resp)
    }

    fn call_once(
        &self,
        req: &GenerationRequest,
        events: &mut dyn FnMut(StreamEvent),
    ) -> Result<GenerationResult<S>, BackendError> {
        let started = Instant::now();
        let resp = self.post(req)?;
        if req.stream {
            self.read_stream(req, resp, started, events)
        } else {
            self.read_body(req, resp, started, events)
        }
    }

    fn read_body(
        &self,
        req: &GenerationRequest,
        resp: reqwest::blocking::Response,
        started: Instant,
        events: &mut dyn FnMut(StreamEvent),
    ) -> Result<GenerationResult<S>, BackendError> {
        let value: serde_json::Value = resp.json()?;
        let text = value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                BackendError::StreamInterrupted("response carries no message content".into())
            })?
            .to_string();
        events(StreamEvent::FirstToken);
        events(StreamEvent::Text(&text));
        Ok(GenerationResult {
            prompt_tokens: count_tokens(&req.prompt),
            output_tokens: count_tokens(&text),
            prefill_time: S::from_f64_lossy(started.elapsed().as_secs_f64()),
            decode_time: S::zero(),
            token_times: None,
            text,
        })
    }

    fn read_stream(
        &self,
        req: &GenerationRequest,
        resp: reqwest::blocking::Response,
        started: Instant,
        events: &mut dyn FnMut(StreamEvent),
    ) -> Result<GenerationResult<S>, BackendError> {
        let mut text = String::new();
        let mut first_token_at: Option<Instant> = None;
        let mut token_times: Vec<S> = Vec::new();
        let mut finished = false;
        let reader = BufReader::new(resp);
        for line in reader.lines() {
            let line = line.map_err(|e| BackendError::StreamInterrupted(e.to_string()))?;
            let Some(data) = line.strip_prefix("data:") else {
                continue;
            };
            let data = data.trim();
            if data.is_empty() {
                continue;
            }
            if data == "[DONE]" {
                finished = true;
                break;
            }
            let value: serde_json::Value = serde_json::from_str(data)
                .map_err(|e| BackendError::StreamInterrupted(format!("{e} in {data:?}")))?;
            let delta = value
                .pointer("/choices/0/delta/content")
                .and_then(|v| v.as_str())
                .unwrap_or_default();
            if delta.is_empty() {
                continue;
            }
            if first_token_at.is_none() {
                first_token_at = Some(Instant::now());
                events(StreamEvent::FirstToken);
            }
            token_times.push(S::from_f64_lossy(started.elapsed().as_secs_f64()));
            events(StreamEvent::Text(delta));
            text.push_str(delta);
        }
        if !finished {
            return Err(BackendError::StreamInterrupted(
                "stream ended without [DONE]".to_string(),
            ));
        }

        let done = Instant::now();
        let first = first_token_at.unwrap_or(done);
        Ok(GenerationResult {
            prompt_tokens: count_tokens(&req.prompt),
            output_tokens: count_tokens(&text),
            prefill_time: S::from_f64_lossy(first.duration_since(started).as_secs_f64()),
            decode_time: S::from_f64_lossy(done.duration_since(first).as_secs_f64()),
            token_times: Some(token_times),
            text,
        })
    }
}

impl<S: Scalar> GenerationBackend<S> for RemoteBackend<S> {
    fn generate(
        &self,
        req: &GenerationRequest,
        events: &mut dyn FnMut(StreamEvent),
    ) -> Result<GenerationResult<S>, BackendError> {
        req.validate()?;
        let mut last_err = None;
        for attempt in 0..=self.cfg.max_retries {
            // Only retry attempts that failed before any output streamed.
            let mut streamed = false;
            let mut tap = |ev: StreamEvent| {
                streamed = true;
                events(ev);
            };
            match self.call_once(req, &mut tap) {
                Ok(res) => return Ok(res),
                Err(e) if streamed => return Err(e),
                Err(e) => {
                    log::warn!("generation attempt {attempt} failed: {e}");
                    last_err = Some(e);
                    std::thread::sleep(Duration::from_millis(50 << attempt));
                }
            }
        }
        Err(last_err.expect("at least one attempt ran"))
    }
}
