//! Execution substrate: resource classes, schedulable units, timelines, and
//! the two executors (simulated clock and real threads).
//!
//! The schedulers in [`crate::engine`] and [`crate::pipeline`] are written
//! against one small vocabulary:
//!
//! * a [`UnitId`] names one schedulable unit of one query job — retrieval,
//!   or the prefill/decode half of one generation call;
//! * every unit occupies exactly one slot of one [`ResourceClass`] while it
//!   runs: retrieval is `Search`, prefill is `Compute`, decode is
//!   `MemoryBandwidth`;
//! * an [`Executor`] accepts [`Launch`]es and delivers [`Completion`]s in
//!   time order.
//!
//! [`SimExecutor`] runs on a deterministic logical clock: durations come
//! from the backend's cost model, completions pop off an event heap, and a
//! whole batch replays byte-identically. [`ThreadExecutor`] runs the same
//! launches against the real clock with one thread per generation call,
//! which is the mode used against live endpoints. Both deliver the same
//! completion vocabulary, so scheduling code has a single code path.

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, StreamEvent};
use crate::dag::{Phase, PointId};
use crate::num::Scalar;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

/// The three contended resources of a serving stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceClass {
    /// Host-memory-bound retrieval.
    Search,
    /// Compute-bound prompt ingestion (prefill).
    Compute,
    /// Bandwidth-bound token generation (decode).
    #[serde(rename = "bandwidth")]
    MemoryBandwidth,
}

impl ResourceClass {
    pub const ALL: [ResourceClass; 3] = [
        ResourceClass::Search,
        ResourceClass::Compute,
        ResourceClass::MemoryBandwidth,
    ];
}

/// Concurrent slots per resource class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacities {
    pub search: usize,
    pub compute: usize,
    pub bandwidth: usize,
}

impl Default for Capacities {
    fn default() -> Self {
        Capacities {
            search: 1,
            compute: 2,
            bandwidth: 4,
        }
    }
}

impl Capacities {
    pub fn serial() -> Self {
        Capacities {
            search: 1,
            compute: 1,
            bandwidth: 1,
        }
    }

    pub fn get(&self, class: ResourceClass) -> usize {
        match class {
            ResourceClass::Search => self.search,
            ResourceClass::Compute => self.compute,
            ResourceClass::MemoryBandwidth => self.bandwidth,
        }
    }
}

/// Identifier of a submitted query job, monotonically increasing from 1.
pub type JobId = u32;

/// The schedulable stages of one query job.
///
/// `sort_key` fixes the dispatch tie-break: within a job, retrieval before
/// decomposition before points (ascending id) before the whole-answer
/// baseline; prefill before decode of the same call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKey {
    /// Corpus retrieval for the query.
    Search,
    /// Decomposition call, prefill half.
    GenPrefill,
    /// Decomposition call, decode half.
    GenDecode,
    /// Expansion of one point, prefill half.
    PointPrefill(PointId),
    /// Expansion of one point, decode half.
    PointDecode(PointId),
    /// Single-shot baseline, prefill half.
    WholePrefill,
    /// Single-shot baseline, decode half.
    WholeDecode,
}

impl StageKey {
    pub fn class(&self) -> ResourceClass {
        match self {
            StageKey::Search => ResourceClass::Search,
            StageKey::GenPrefill | StageKey::PointPrefill(_) | StageKey::WholePrefill => {
                ResourceClass::Compute
            }
            StageKey::GenDecode | StageKey::PointDecode(_) | StageKey::WholeDecode => {
                ResourceClass::MemoryBandwidth
            }
        }
    }

    pub fn phase(&self) -> Option<Phase> {
        match self {
            StageKey::Search => None,
            StageKey::GenPrefill | StageKey::PointPrefill(_) | StageKey::WholePrefill => {
                Some(Phase::Prefill)
            }
            StageKey::GenDecode | StageKey::PointDecode(_) | StageKey::WholeDecode => {
                Some(Phase::Decode)
            }
        }
    }

    /// (group, point, phase) dispatch order within one job.
    pub fn sort_key(&self) -> (u8, PointId, u8) {
        match self {
            StageKey::Search => (0, 0, 0),
            StageKey::GenPrefill => (1, 0, 0),
            StageKey::GenDecode => (1, 0, 1),
            StageKey::PointPrefill(p) => (2, *p, 0),
            StageKey::PointDecode(p) => (2, *p, 1),
            StageKey::WholePrefill => (3, 0, 0),
            StageKey::WholeDecode => (3, 0, 1),
        }
    }

    /// Timeline label: `Search`, `Pre:kp`/`Dec:kp` for the decomposition
    /// call, `Pre:N`/`Dec:N` for point N, `Pre:all`/`Dec:all` for the
    /// baseline.
    pub fn label(&self) -> String {
        match self {
            StageKey::Search => "Search".to_string(),
            StageKey::GenPrefill => "Pre:kp".to_string(),
            StageKey::GenDecode => "Dec:kp".to_string(),
            StageKey::PointPrefill(p) => format!("Pre:{p}"),
            StageKey::PointDecode(p) => format!("Dec:{p}"),
            StageKey::WholePrefill => "Pre:all".to_string(),
            StageKey::WholeDecode => "Dec:all".to_string(),
        }
    }
}

impl PartialOrd for StageKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for StageKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

/// One schedulable unit: a stage of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitId {
    pub job: JobId,
    pub stage: StageKey,
}

impl UnitId {
    pub fn new(job: JobId, stage: StageKey) -> Self {
        UnitId { job, stage }
    }
}

/// One completed interval on the run timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent<S> {
    /// Present in multi-job timelines; omitted for single-query runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub job: Option<JobId>,
    pub stage: String,
    pub start: S,
    pub end: S,
    pub class: ResourceClass,
}

/// What the scheduler hands an executor.
pub enum Launch {
    /// Occupy the search slot for one retrieval pass. The retrieval itself
    /// is performed by the scheduler; the executor only accounts for the
    /// time the slot is held.
    Search,
    /// Issue a generation call. The launched unit is its prefill half; the
    /// backend's phase boundary completes it and makes `decode_unit`
    /// launchable.
    Call {
        request: Box<GenerationRequest>,
        decode_unit: UnitId,
    },
    /// Occupy a bandwidth slot for the decode half of an already-issued
    /// call until the stream ends.
    Decode,
}

/// Delivered when a unit finishes (or its call fails).
pub struct Completion<S: Scalar> {
    pub unit: UnitId,
    /// Completion time on the executor's clock.
    pub at: S,
    /// The call's outcome rides on the unit that ends it: the decode unit
    /// carries `Ok(result)` (or a mid-stream error); a call that fails
    /// before its phase boundary carries `Err` on the prefill unit instead,
    /// and its decode never becomes launchable. Search completions carry
    /// nothing.
    pub payload: Option<Result<crate::backend::GenerationResult<S>, BackendError>>,
}

/// Accepts launches, delivers completions in time order.
///
/// The contract both implementations obey:
///
/// * `launch(unit, Launch::Search)` completes after the cost model's search
///   time (sim) or immediately (threads; real retrieval is host work the
///   scheduler already did);
/// * `launch(unit, Launch::Call { .. })` completes `unit` at the call's
///   phase boundary carrying the result, after which the scheduler may
///   `launch(decode_unit, Launch::Decode)`, which completes when the call's
///   stream ends;
/// * `next_completion()` blocks until the earliest pending completion.
pub trait Executor<S: Scalar> {
    fn launch(&mut self, unit: UnitId, launch: Launch);
    fn next_completion(&mut self) -> Option<Completion<S>>;
    /// Current time on this executor's clock.
    fn now(&self) -> S;
}

// --- simulated executor ------------------------------------------------------

struct SimEvent<S: Scalar> {
    at: S,
    seq: u64,
    unit: UnitId,
    payload: Option<Result<crate::backend::GenerationResult<S>, BackendError>>,
}

impl<S: Scalar> PartialEq for SimEvent<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<S: Scalar> Eq for SimEvent<S> {}
impl<S: Scalar> PartialOrd for SimEvent<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Scalar> Ord for SimEvent<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first. Ties break
        // by launch order so replays are exact.
        self.at
            .to_f64_lossy()
            .total_cmp(&other.at.to_f64_lossy())
            .reverse()
            .then(self.seq.cmp(&other.seq).reverse())
    }
}

/// Deterministic discrete-event executor on a logical clock.
///
/// Generation calls run eagerly at launch (the backend is pure, so the
/// result exists immediately); only their *timing* is simulated. The decode
/// duration is remembered so the decode unit can be launched later and still
/// take the right amount of logical time.
pub struct SimExecutor<S: Scalar> {
    backend: Arc<dyn GenerationBackend<S>>,
    /// Logical duration of one search pass.
    pub search_time: S,
    now: S,
    seq: u64,
    events: BinaryHeap<SimEvent<S>>,
    /// decode unit -> (decode duration, finished result), parked until the
    /// decode launch.
    pending_decodes: HashMap<UnitId, (S, crate::backend::GenerationResult<S>)>,
}

impl<S: Scalar> SimExecutor<S> {
    pub fn new(backend: Arc<dyn GenerationBackend<S>>, search_time: S) -> Self {
        SimExecutor {
            backend,
            search_time,
            now: S::zero(),
            seq: 0,
            events: BinaryHeap::new(),
            pending_decodes: HashMap::new(),
        }
    }

    fn push(&mut self, at: S, unit: UnitId, payload: Option<Result<crate::backend::GenerationResult<S>, BackendError>>) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(SimEvent { at, seq, unit, payload });
    }
}

impl<S: Scalar> Executor<S> for SimExecutor<S> {
    fn launch(&mut self, unit: UnitId, launch: Launch) {
        match launch {
            Launch::Search => {
                let at = self.now + self.search_time;
                self.push(at, unit, None);
            }
            Launch::Call { request, decode_unit } => {
                // The backend is pure, so the call runs eagerly here; only
                // its timing plays out on the logical clock.
                let result = self.backend.generate(&request, &mut |_| {});
                match result {
                    Ok(res) => {
                        let boundary = self.now + res.prefill_time;
                        self.pending_decodes
                            .insert(decode_unit, (res.decode_time, res));
                        self.push(boundary, unit, None);
                    }
                    Err(e) => {
                        // Failures surface at the prefill unit immediately.
                        self.push(self.now, unit, Some(Err(e)));
                    }
                }
            }
            Launch::Decode => {
                let (dur, res) = self
                    .pending_decodes
                    .remove(&unit)
                    .expect("decode launched for a call whose prefill completed");
                let at = self.now + dur;
                self.push(at, unit, Some(Ok(res)));
            }
        }
    }

    fn next_completion(&mut self) -> Option<Completion<S>> {
        let ev = self.events.pop()?;
        debug_assert!(ev.at >= self.now, "logical clock runs forward");
        self.now = ev.at;
        Some(Completion {
            unit: ev.unit,
            at: ev.at,
            payload: ev.payload,
        })
    }

    fn now(&self) -> S {
        self.now
    }
}

// --- thread executor ----------------------------------------------------------

enum ThreadMsg<S: Scalar> {
    /// Phase boundary reached: completes the prefill unit mid-stream, which
    /// frees its compute slot while decode is still running.
    Boundary { prefill: UnitId, at: S },
    /// The call failed before its boundary; the decode never happens.
    CallFailed {
        prefill: UnitId,
        decode: UnitId,
        at: S,
        error: BackendError,
    },
    /// Stream over: completes the decode unit (once launched) with the
    /// call's outcome.
    StreamEnd {
        decode: UnitId,
        at: S,
        payload: Result<crate::backend::GenerationResult<S>, BackendError>,
    },
}

/// Wall-clock executor: one worker thread per generation call.
///
/// The phase boundary is observed from the backend's stream events
/// ([`StreamEvent::FirstToken`]). Decode completions for calls whose decode
/// unit has not been launched yet are buffered and delivered right after the
/// launch, with the end clamped to be no earlier than the launch.
pub struct ThreadExecutor<S: Scalar> {
    backend: Arc<dyn GenerationBackend<S>>,
    started: Instant,
    tx: mpsc::Sender<ThreadMsg<S>>,
    rx: mpsc::Receiver<ThreadMsg<S>>,
    /// Completions ready to deliver.
    ready: Vec<Completion<S>>,
    /// Decode units launched but not yet finished.
    launched_decodes: HashMap<UnitId, bool>,
    /// Streams that ended before their decode unit was launched.
    finished_decodes:
        HashMap<UnitId, (S, Result<crate::backend::GenerationResult<S>, BackendError>)>,
    live_calls: Arc<AtomicU64>,
}

impl<S: Scalar> ThreadExecutor<S> {
    pub fn new(backend: Arc<dyn GenerationBackend<S>>) -> Self {
        let (tx, rx) = mpsc::channel();
        ThreadExecutor {
            backend,
            started: Instant::now(),
            tx,
            rx,
            ready: Vec::new(),
            launched_decodes: HashMap::new(),
            finished_decodes: HashMap::new(),
            live_calls: Arc::new(AtomicU64::new(0)),
        }
    }

    fn elapsed(&self) -> S {
        S::from_f64_lossy(self.started.elapsed().as_secs_f64())
    }

    fn absorb(&mut self, msg: ThreadMsg<S>) {
        match msg {
            ThreadMsg::Boundary { prefill, at } => {
                self.ready.push(Completion {
                    unit: prefill,
                    at,
                    payload: None,
                });
            }
            ThreadMsg::CallFailed {
                prefill,
                decode,
                at,
                error,
            } => {
                self.launched_decodes.remove(&decode);
                self.ready.push(Completion {
                    unit: prefill,
                    at,
                    payload: Some(Err(error)),
                });
            }
            ThreadMsg::StreamEnd { decode, at, payload } => {
                if self.launched_decodes.remove(&decode).is_some() {
                    self.ready.push(Completion {
                        unit: decode,
                        at,
                        payload: Some(payload),
                    });
                } else {
                    self.finished_decodes.insert(decode, (at, payload));
                }
            }
        }
    }
}

impl<S: Scalar> Executor<S> for ThreadExecutor<S> {
    fn launch(&mut self, unit: UnitId, launch: Launch) {
        match launch {
            // Real retrieval already happened on the scheduler's thread;
            // the search slot releases immediately.
            Launch::Search => {
                let at = self.elapsed();
                self.ready.push(Completion {
                    unit,
                    at,
                    payload: None,
                });
            }
            Launch::Call { request, decode_unit } => {
                let backend = Arc::clone(&self.backend);
                let tx = self.tx.clone();
                let started = self.started;
                let live = Arc::clone(&self.live_calls);
                live.fetch_add(1, AtomicOrdering::SeqCst);
                std::thread::spawn(move || {
                    let now = |i: Instant| S::from_f64_lossy(i.elapsed().as_secs_f64());
                    // The boundary message goes out mid-stream, so the
                    // scheduler can reuse the compute slot while this call
                    // is still decoding.
                    let mut boundary_sent = false;
                    let result = backend.generate(&request, &mut |ev| {
                        if matches!(ev, StreamEvent::FirstToken) && !boundary_sent {
                            boundary_sent = true;
                            let _ = tx.send(ThreadMsg::Boundary {
                                prefill: unit,
                                at: now(started),
                            });
                        }
                    });
                    let at = now(started);
                    match result {
                        Ok(res) => {
                            if !boundary_sent {
                                let _ = tx.send(ThreadMsg::Boundary { prefill: unit, at });
                            }
                            let _ = tx.send(ThreadMsg::StreamEnd {
                                decode: decode_unit,
                                at,
                                payload: Ok(res),
                            });
                        }
                        Err(e) if boundary_sent => {
                            // Failed mid-decode; the error rides the decode
                            // unit like any stream outcome.
                            let _ = tx.send(ThreadMsg::StreamEnd {
                                decode: decode_unit,
                                at,
                                payload: Err(e),
                            });
                        }
                        Err(e) => {
                            let _ = tx.send(ThreadMsg::CallFailed {
                                prefill: unit,
                                decode: decode_unit,
                                at,
                                error: e,
                            });
                        }
                    }
                    live.fetch_sub(1, AtomicOrdering::SeqCst);
                });
            }
            Launch::Decode => {
                if let Some((at, payload)) = self.finished_decodes.remove(&unit) {
                    // Stream already ended; deliver now, not before launch.
                    let launch_at = self.elapsed();
                    let at = if at > launch_at { at } else { launch_at };
                    self.ready.push(Completion {
                        unit,
                        at,
                        payload: Some(payload),
                    });
                } else {
                    self.launched_decodes.insert(unit, true);
                }
            }
        }
    }

    fn next_completion(&mut self) -> Option<Completion<S>> {
        loop {
            while let Ok(msg) = self.rx.try_recv() {
                self.absorb(msg);
            }
            if !self.ready.is_empty() {
                // Earliest-finishing first keeps ordering close to the sim.
                let idx = self
                    .ready
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        a.at.to_f64_lossy().total_cmp(&b.at.to_f64_lossy())
                    })
                    .map(|(i, _)| i)?;
                return Some(self.ready.swap_remove(idx));
            }
            let outstanding = self.live_calls.load(AtomicOrdering::SeqCst) > 0
                || !self.launched_decodes.is_empty();
            if !outstanding {
                return None;
            }
            match self.rx.recv() {
                Ok(msg) => self.absorb(msg),
                Err(_) => return None,
            }
        }
    }

    fn now(&self) -> S {
        self.elapsed()
    }
}
