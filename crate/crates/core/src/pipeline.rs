//! Multi-query scheduling across search, compute and bandwidth slots.
//!
//! A [`PipelineRunner`] owns a set of query jobs, an [`Executor`] and the
//! slot capacities of the three resource classes. Each job walks the same
//! state machine — retrieve, decompose, expand points, merge — but jobs
//! share the slot pools, so while one query decodes (bandwidth) another can
//! prefill (compute) and a third can search, which is where the batch
//! speedup comes from.
//!
//! Dispatch is two alternating moves, both deterministic:
//!
//! * [`PipelineRunner::schedule_tick`] launches every ready unit a free slot
//!   exists for, scanning jobs in submission order and a job's units in
//!   stage order (the FIFO tie-break);
//! * the next [`Completion`] from the executor is absorbed, which frees a
//!   slot, may unlock successor units, and may finish a job.
//!
//! Failures stay inside their job: a backend error marks that job failed
//! and the batch keeps going.

use crate::backend::{
    GenerationBackend, GenerationRequest, PhaseHint, KEYPOINT_KEY_SUFFIX,
};
use crate::dag::{
    build_point_dag, expand_to_stage_graph, ready_set, Phase, PointDag, PointId, StageGraph,
    StageNode,
};
use crate::engine::{merge_outputs, EngineError, Mode};
use crate::exec::{
    Capacities, Completion, Executor, JobId, Launch, ResourceClass, SimExecutor, StageKey,
    TimelineEvent, UnitId,
};
use crate::num::Scalar;
use crate::prompt::{
    assemble_expansion_input, assemble_generation_prompt, whole_answer_prompt, PromptConfig,
};
use crate::retrieval::{Chunk, Retriever};
use crate::stream::parse_points;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("job queue is full ({bound} jobs active)")]
    QueueFull { bound: usize },
}

/// One query to run, plus how to run it.
#[derive(Debug, Clone)]
pub struct QuerySpec {
    /// External identifier used in reports, e.g. `q1`.
    pub query_id: String,
    pub query: String,
    pub mode: Mode,
    pub seed: u64,
    /// Prefix for simulator script keys (`<prefix>::keypoints`,
    /// `<prefix>::point:<id>`, `<prefix>::whole`). Defaults to the query
    /// id, so every request carries a stable handle even without scripts.
    pub script_prefix: Option<String>,
    /// Output budget for expansion and baseline calls.
    pub max_tokens: Option<usize>,
}

impl QuerySpec {
    pub fn new(query_id: impl Into<String>, query: impl Into<String>) -> Self {
        QuerySpec {
            query_id: query_id.into(),
            query: query.into(),
            mode: Mode::DepExp,
            seed: 0,
            script_prefix: None,
            max_tokens: None,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_script_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.script_prefix = Some(prefix.into());
        self
    }

    pub fn with_max_tokens(mut self, n: usize) -> Self {
        self.max_tokens = Some(n);
        self
    }

    /// Script-key prefix in effect: the explicit one, or the query id.
    pub fn key_prefix(&self) -> &str {
        self.script_prefix.as_deref().unwrap_or(&self.query_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobPhase {
    /// Waiting for / running corpus retrieval.
    Searching,
    /// Running the decomposition call (or the baseline call in
    /// [`Mode::Normal`]).
    Generating,
    /// Expanding points against the stage graph.
    Expanding,
    Done,
    Failed,
}

/// Live state of one submitted query.
pub struct JobState<S: Scalar> {
    pub id: JobId,
    pub spec: QuerySpec,
    pub phase: JobPhase,
    pub retrieved: Vec<Chunk>,
    pub dag: Option<PointDag>,
    stage_graph: Option<StageGraph>,
    decomposition_text: Option<String>,
    completed_stages: BTreeSet<StageNode>,
    launched: BTreeSet<StageKey>,
    completed_keys: BTreeSet<StageKey>,
    unit_starts: BTreeMap<StageKey, S>,
    pub outputs: BTreeMap<PointId, String>,
    pub answer: Option<String>,
    pub error: Option<EngineError>,
    pub warnings: Vec<String>,
    pub timeline: Vec<TimelineEvent<S>>,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub submitted_at: S,
    pub finished_at: Option<S>,
}

impl<S: Scalar> JobState<S> {
    fn new(id: JobId, spec: QuerySpec, submitted_at: S) -> Self {
        JobState {
            id,
            spec,
            phase: JobPhase::Searching,
            retrieved: Vec::new(),
            dag: None,
            stage_graph: None,
            decomposition_text: None,
            completed_stages: BTreeSet::new(),
            launched: BTreeSet::new(),
            completed_keys: BTreeSet::new(),
            unit_starts: BTreeMap::new(),
            outputs: BTreeMap::new(),
            answer: None,
            error: None,
            warnings: Vec::new(),
            timeline: Vec::new(),
            prompt_tokens: 0,
            output_tokens: 0,
            submitted_at,
            finished_at: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, JobPhase::Done | JobPhase::Failed)
    }

    /// Units this job could launch right now, in stage order.
    fn ready_stages(&self) -> Vec<StageKey> {
        let mut out = Vec::new();
        match self.phase {
            JobPhase::Searching => {
                if !self.launched.contains(&StageKey::Search) {
                    out.push(StageKey::Search);
                }
            }
            JobPhase::Generating => {
                let (pre, dec) = match self.spec.mode {
                    Mode::Normal => (StageKey::WholePrefill, StageKey::WholeDecode),
                    _ => (StageKey::GenPrefill, StageKey::GenDecode),
                };
                if !self.launched.contains(&pre) {
                    out.push(pre);
                } else if self.completed_keys.contains(&pre) && !self.launched.contains(&dec) {
                    out.push(dec);
                }
            }
            JobPhase::Expanding => {
                let graph = self.stage_graph.as_ref().expect("expanding implies graph");
                for node in ready_set(graph, &self.completed_stages) {
                    let key = match node.phase {
                        Phase::Prefill => StageKey::PointPrefill(node.point),
                        Phase::Decode => StageKey::PointDecode(node.point),
                    };
                    if !self.launched.contains(&key) {
                        out.push(key);
                    }
                }
            }
            JobPhase::Done | JobPhase::Failed => {}
        }
        out
    }

    fn fail(&mut self, error: EngineError, at: S) {
        self.phase = JobPhase::Failed;
        self.error = Some(error);
        self.finished_at = Some(at);
    }

    /// Parses the decomposition text and builds the expansion graph. In
    /// [`Mode::ParExp`] declared relations are dropped, so every point is a
    /// root: edges are ignored at schedule time and no parent context is
    /// injected.
    fn absorb_decomposition(&mut self) -> Result<(), EngineError> {
        let text = self
            .decomposition_text
            .as_deref()
            .expect("decode completion stored the text");
        let parsed = parse_points(text)?;
        self.warnings.extend(parsed.warnings);
        let relations = match self.spec.mode {
            Mode::ParExp => Vec::new(),
            _ => parsed.relations,
        };
        let dag = build_point_dag(parsed.points, relations)?;
        self.stage_graph = Some(expand_to_stage_graph(&dag));
        self.dag = Some(dag);
        Ok(())
    }

    fn try_finish_expansion(&mut self, at: S) {
        let graph = self.stage_graph.as_ref().expect("expanding implies graph");
        if self.completed_stages.len() < graph.nodes().len() {
            return;
        }
        let dag = self.dag.as_ref().expect("expanding implies dag");
        match merge_outputs(dag, &self.outputs) {
            Ok(answer) => {
                self.answer = Some(answer);
                self.phase = JobPhase::Done;
            }
            Err(e) => {
                self.phase = JobPhase::Failed;
                self.error = Some(e);
            }
        }
        self.finished_at = Some(at);
    }
}

/// What [`PipelineRunner::schedule_tick`] launched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub job: JobId,
    pub stage: StageKey,
    pub class: ResourceClass,
}

#[derive(Debug, Default, Clone, Copy)]
struct SlotUse {
    search: usize,
    compute: usize,
    bandwidth: usize,
}

impl SlotUse {
    fn get(&self, class: ResourceClass) -> usize {
        match class {
            ResourceClass::Search => self.search,
            ResourceClass::Compute => self.compute,
            ResourceClass::MemoryBandwidth => self.bandwidth,
        }
    }

    fn slot(&mut self, class: ResourceClass) -> &mut usize {
        match class {
            ResourceClass::Search => &mut self.search,
            ResourceClass::Compute => &mut self.compute,
            ResourceClass::MemoryBandwidth => &mut self.bandwidth,
        }
    }
}

/// Outcome of one finished job.
pub struct JobResult<S: Scalar> {
    pub job_id: JobId,
    pub query_id: String,
    pub mode: Mode,
    pub answer: Result<String, EngineError>,
    pub outputs: BTreeMap<PointId, String>,
    pub warnings: Vec<String>,
    pub timeline: Vec<TimelineEvent<S>>,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    /// Submission-to-finish latency on the executor's clock.
    pub elapsed: S,
}

/// Outcome of a whole batch.
pub struct BatchResult<S: Scalar> {
    /// Per-job results in submission order.
    pub jobs: Vec<JobResult<S>>,
    /// All events of the batch, in completion order, tagged with job ids.
    pub timeline: Vec<TimelineEvent<S>>,
    /// Time from batch start to the last completion.
    pub makespan: S,
}

/// The multi-query dispatcher.
pub struct PipelineRunner<S: Scalar, E: Executor<S>> {
    executor: E,
    caps: Capacities,
    in_use: SlotUse,
    pub prompt: PromptConfig,
    pub retriever: Option<Arc<Retriever<S>>>,
    pub retrieve_k: usize,
    queue_bound: usize,
    jobs: BTreeMap<JobId, JobState<S>>,
    next_id: JobId,
    in_flight: usize,
    global_timeline: Vec<TimelineEvent<S>>,
}

impl<S: Scalar, E: Executor<S>> PipelineRunner<S, E> {
    pub fn new(executor: E, caps: Capacities) -> Self {
        PipelineRunner {
            executor,
            caps,
            in_use: SlotUse::default(),
            prompt: PromptConfig::default(),
            retriever: None,
            retrieve_k: 4,
            queue_bound: 64,
            jobs: BTreeMap::new(),
            next_id: 1,
            in_flight: 0,
            global_timeline: Vec::new(),
        }
    }

    pub fn with_prompt(mut self, prompt: PromptConfig) -> Self {
        self.prompt = prompt;
        self
    }

    pub fn with_retriever(mut self, retriever: Arc<Retriever<S>>) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn with_retrieve_k(mut self, k: usize) -> Self {
        self.retrieve_k = k;
        self
    }

    pub fn with_queue_bound(mut self, bound: usize) -> Self {
        self.queue_bound = bound;
        self
    }

    pub fn active_jobs(&self) -> usize {
        self.jobs.values().filter(|j| !j.is_finished()).count()
    }

    pub fn job(&self, id: JobId) -> Option<&JobState<S>> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobState<S>> {
        self.jobs.values()
    }

    pub fn now(&self) -> S {
        self.executor.now()
    }

    /// Admits a query. Ids are assigned 1, 2, 3, … in submission order.
    pub fn submit(&mut self, spec: QuerySpec) -> Result<JobId, PipelineError> {
        if self.active_jobs() >= self.queue_bound {
            return Err(PipelineError::QueueFull {
                bound: self.queue_bound,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        let job = JobState::new(id, spec, self.executor.now());
        self.jobs.insert(id, job);
        Ok(id)
    }

    /// Admits a query whose decomposition already exists, entering directly
    /// at the expansion phase. Used for single-query expansion runs.
    pub fn submit_with_dag(
        &mut self,
        spec: QuerySpec,
        dag: PointDag,
    ) -> Result<JobId, PipelineError> {
        let dag = match spec.mode {
            Mode::ParExp => strip_relations(&dag),
            _ => dag,
        };
        let id = self.submit(spec)?;
        let job = self.jobs.get_mut(&id).expect("just inserted");
        job.stage_graph = Some(expand_to_stage_graph(&dag));
        job.dag = Some(dag);
        job.phase = JobPhase::Expanding;
        Ok(id)
    }

    /// Launches every ready unit that fits a free slot. Jobs are scanned in
    /// submission order and each job's units in stage order, so dispatch is
    /// first-in-first-out with the documented tie-break.
    pub fn schedule_tick(&mut self) -> Vec<Assignment> {
        let candidates: Vec<(JobId, StageKey)> = self
            .jobs
            .values()
            .flat_map(|j| j.ready_stages().into_iter().map(move |k| (j.id, k)))
            .collect();
        let mut out = Vec::new();
        for (id, key) in candidates {
            let class = key.class();
            if self.in_use.get(class) >= self.caps.get(class) {
                continue;
            }
            if self.launch_unit(id, key) {
                out.push(Assignment {
                    job: id,
                    stage: key,
                    class,
                });
            }
        }
        out
    }

    fn launch_unit(&mut self, id: JobId, key: StageKey) -> bool {
        let now = self.executor.now();
        let retriever = self.retriever.clone();
        let retrieve_k = self.retrieve_k;
        let Some(job) = self.jobs.get_mut(&id) else {
            return false;
        };
        job.launched.insert(key);
        job.unit_starts.insert(key, now);

        let launch = match key {
            StageKey::Search => {
                // Retrieval is host work done by the scheduler at launch;
                // the executor accounts for the slot time.
                if let Some(r) = retriever {
                    match r.top_k(&job.spec.query, retrieve_k) {
                        Ok(hits) => {
                            job.retrieved = hits.into_iter().map(|(c, _)| c).collect();
                        }
                        Err(e) => {
                            job.fail(e.into(), now);
                            return false;
                        }
                    }
                }
                Launch::Search
            }
            StageKey::GenPrefill => {
                let prompt = match assemble_generation_prompt(
                    &job.spec.query,
                    &job.retrieved,
                    &self.prompt.decompose,
                ) {
                    Ok(p) => p,
                    Err(e) => {
                        job.fail(e.into(), now);
                        return false;
                    }
                };
                let prefix = job.spec.key_prefix();
                let req = GenerationRequest::new(prompt)
                    .with_phase(PhaseHint::Prefill)
                    .with_seed(job.spec.seed)
                    .with_script_key(format!("{prefix}{KEYPOINT_KEY_SUFFIX}"));
                Launch::Call {
                    request: Box::new(req),
                    decode_unit: UnitId::new(id, StageKey::GenDecode),
                }
            }
            StageKey::PointPrefill(p) => {
                let dag = job.dag.as_ref().expect("expanding implies dag");
                let input =
                    match assemble_expansion_input(p, dag, &job.outputs, &self.prompt) {
                        Ok(i) => i,
                        Err(e) => {
                            job.fail(e.into(), now);
                            return false;
                        }
                    };
                let mut req = GenerationRequest::new(input.render())
                    .with_phase(PhaseHint::Prefill)
                    .with_seed(job.spec.seed)
                    .with_script_key(format!("{}::point:{p}", job.spec.key_prefix()));
                if let Some(n) = job.spec.max_tokens {
                    req = req.with_max_tokens(n);
                }
                Launch::Call {
                    request: Box::new(req),
                    decode_unit: UnitId::new(id, StageKey::PointDecode(p)),
                }
            }
            StageKey::WholePrefill => {
                let prompt = whole_answer_prompt(&job.spec.query, &job.retrieved, &self.prompt);
                let mut req = GenerationRequest::new(prompt)
                    .with_phase(PhaseHint::Whole)
                    .with_seed(job.spec.seed)
                    .with_script_key(format!("{}::whole", job.spec.key_prefix()));
                if let Some(n) = job.spec.max_tokens {
                    req = req.with_max_tokens(n);
                }
                Launch::Call {
                    request: Box::new(req),
                    decode_unit: UnitId::new(id, StageKey::WholeDecode),
                }
            }
            StageKey::GenDecode | StageKey::PointDecode(_) | StageKey::WholeDecode => {
                Launch::Decode
            }
        };

        *self.in_use.slot(key.class()) += 1;
        self.in_flight += 1;
        self.executor.launch(UnitId::new(id, key), launch);
        true
    }

    fn process(&mut self, c: Completion<S>) {
        self.in_flight -= 1;
        let key = c.unit.stage;
        *self.in_use.slot(key.class()) -= 1;
        let Some(job) = self.jobs.get_mut(&c.unit.job) else {
            return;
        };

        let start = job.unit_starts.get(&key).copied().unwrap_or(c.at);
        let event = TimelineEvent {
            job: Some(job.id),
            stage: key.label(),
            start,
            end: c.at,
            class: key.class(),
        };
        job.timeline.push(event.clone());
        self.global_timeline.push(event);
        job.completed_keys.insert(key);
        if let Some(node) = stage_node_of(key) {
            job.completed_stages.insert(node);
        }

        match c.payload {
            Some(Err(e)) => {
                if job.phase != JobPhase::Failed {
                    job.fail(error_for(key, e), c.at);
                }
                return;
            }
            Some(Ok(res)) => {
                if job.phase != JobPhase::Failed {
                    job.prompt_tokens += res.prompt_tokens;
                    job.output_tokens += res.output_tokens;
                    match key {
                        StageKey::GenDecode => job.decomposition_text = Some(res.text),
                        StageKey::PointDecode(p) => {
                            job.outputs.insert(p, res.text);
                        }
                        StageKey::WholeDecode => job.answer = Some(res.text),
                        _ => {}
                    }
                }
            }
            None => {}
        }
        if job.phase == JobPhase::Failed {
            return;
        }

        match key {
            StageKey::Search => job.phase = JobPhase::Generating,
            StageKey::GenDecode => match job.absorb_decomposition() {
                Ok(()) => job.phase = JobPhase::Expanding,
                Err(e) => job.fail(e, c.at),
            },
            StageKey::WholeDecode => {
                job.phase = JobPhase::Done;
                job.finished_at = Some(c.at);
            }
            StageKey::PointDecode(_) => job.try_finish_expansion(c.at),
            _ => {}
        }
    }

    /// Absorbs one completion (blocking until one exists) and re-dispatches.
    /// Returns false once nothing is running or launchable.
    pub fn step(&mut self) -> bool {
        self.schedule_tick();
        if self.in_flight == 0 {
            return false;
        }
        let c = self
            .executor
            .next_completion()
            .expect("in-flight units complete");
        self.process(c);
        true
    }

    /// Runs until every admitted job is finished.
    pub fn run(&mut self) {
        while self.step() {}
    }

    /// Time from batch start to the latest completed unit.
    pub fn makespan(&self) -> S {
        self.global_timeline
            .iter()
            .map(|e| e.end)
            .fold(S::zero(), |acc, t| if t > acc { t } else { acc })
    }

    pub fn take_results(self) -> BatchResult<S> {
        let makespan = self.makespan();
        let jobs = self
            .jobs
            .into_values()
            .map(|job| {
                let elapsed = job.finished_at.unwrap_or(job.submitted_at) - job.submitted_at;
                let answer = match (job.answer, job.error) {
                    (_, Some(e)) => Err(e),
                    (Some(a), None) => Ok(a),
                    (None, None) => Err(EngineError::Internal(
                        "job never finished".to_string(),
                    )),
                };
                JobResult {
                    job_id: job.id,
                    query_id: job.spec.query_id,
                    mode: job.spec.mode,
                    answer,
                    outputs: job.outputs,
                    warnings: job.warnings,
                    timeline: job.timeline,
                    prompt_tokens: job.prompt_tokens,
                    output_tokens: job.output_tokens,
                    elapsed,
                }
            })
            .collect();
        BatchResult {
            jobs,
            timeline: self.global_timeline,
            makespan,
        }
    }
}

fn stage_node_of(key: StageKey) -> Option<StageNode> {
    match key {
        StageKey::PointPrefill(p) => Some(StageNode::prefill(p)),
        StageKey::PointDecode(p) => Some(StageNode::decode(p)),
        _ => None,
    }
}

fn error_for(key: StageKey, e: crate::backend::BackendError) -> EngineError {
    match key {
        StageKey::PointPrefill(p) => EngineError::BackendFailure {
            point: p,
            phase: Phase::Prefill,
            source: e,
        },
        StageKey::PointDecode(p) => EngineError::BackendFailure {
            point: p,
            phase: Phase::Decode,
            source: e,
        },
        StageKey::GenPrefill | StageKey::GenDecode => {
            EngineError::DecompositionFailure { source: e }
        }
        StageKey::WholePrefill | StageKey::WholeDecode => {
            EngineError::BaselineFailure { source: e }
        }
        StageKey::Search => EngineError::Internal(format!("search unit failed: {e}")),
    }
}

/// Same points, no edges: the schedule-time view of [`Mode::ParExp`].
pub fn strip_relations(dag: &PointDag) -> PointDag {
    build_point_dag(dag.points().cloned().collect(), Vec::new())
        .expect("points of a valid dag rebuild without edges")
}

/// Submits every query to a fresh simulated runner and runs the batch.
pub fn run_batch<S: Scalar>(
    specs: Vec<QuerySpec>,
    backend: Arc<dyn GenerationBackend<S>>,
    caps: Capacities,
    prompt: PromptConfig,
    retriever: Option<Arc<Retriever<S>>>,
    search_time: S,
) -> Result<BatchResult<S>, PipelineError> {
    let executor = SimExecutor::new(backend, search_time);
    let mut runner = PipelineRunner::new(executor, caps)
        .with_prompt(prompt)
        .with_queue_bound(specs.len().max(1));
    if let Some(r) = retriever {
        runner = runner.with_retriever(r);
    }
    for spec in specs {
        runner.submit(spec)?;
    }
    runner.run();
    Ok(runner.take_results())
}
