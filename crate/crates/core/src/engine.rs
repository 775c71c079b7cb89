//! Single-query expansion: dependency gating, merging, baselines.
//!
//! [`run_expansion`] takes an already-built point graph and runs every
//! point's prefill and decode against a generation backend, launching each
//! unit the moment its gates open: a contextual child waits only for the
//! parent's prefill, a dependent child waits for the parent's full decode.
//! With more than one compute slot, independent prefills run side by side
//! and a prefill can overlap an unrelated decode, which is where the
//! speedup over one-at-a-time execution comes from.
//!
//! [`run_sequential_baseline`] is the deliberately naive reference: same
//! prompts, same outputs, but each point's call runs start-to-finish before
//! the next begins. Parallel runs must agree with it byte-for-byte on
//! content; only the clock differs.

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, PhaseHint};
use crate::dag::{DagError, Phase, PointDag, PointId};
use crate::exec::{Capacities, Executor, SimExecutor, StageKey, ThreadExecutor, TimelineEvent};
use crate::num::Scalar;
use crate::pipeline::{PipelineRunner, QuerySpec};
use crate::prompt::{assemble_expansion_input, PromptConfig, PromptError};
use crate::retrieval::RetrievalError;
use crate::stream::StreamError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

/// How a query is answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One whole-answer call, no decomposition.
    Normal,
    /// Decompose, then expand every point at once, ignoring relations.
    ParExp,
    /// Decompose, then expand with dependency gating.
    DepExp,
    /// Dependency-gated expansion with multiple queries pipelined through
    /// shared slots. Per query it behaves like [`Mode::DepExp`].
    PipSch,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Normal, Mode::ParExp, Mode::DepExp, Mode::PipSch];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::ParExp => "parexp",
            Mode::DepExp => "depexp",
            Mode::PipSch => "pipsch",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Mode::Normal),
            "parexp" => Ok(Mode::ParExp),
            "depexp" => Ok(Mode::DepExp),
            "pipsch" => Ok(Mode::PipSch),
            other => Err(format!(
                "unknown mode `{other}` (expected normal, parexp, depexp or pipsch)"
            )),
        }
    }
}

/// Anything that can sink a query run.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("backend failed at point {point} during {phase:?}: {source}")]
    BackendFailure {
        point: PointId,
        phase: Phase,
        #[source]
        source: BackendError,
    },
    #[error("decomposition call failed: {source}")]
    DecompositionFailure {
        #[source]
        source: BackendError,
    },
    #[error("whole-answer call failed: {source}")]
    BaselineFailure {
        #[source]
        source: BackendError,
    },
    #[error("could not parse decomposition: {0}")]
    Parse(#[from] StreamError),
    #[error("invalid point graph: {0}")]
    Graph(#[from] DagError),
    #[error("prompt assembly failed: {0}")]
    Prompt(#[from] PromptError),
    #[error("retrieval failed: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("point {0} finished without output")]
    MissingOutput(PointId),
    #[error("{0}")]
    Internal(String),
}

/// Joins point outputs into the final answer: ascending point id, each
/// section headed by its point title.
pub fn merge_outputs(
    dag: &PointDag,
    outputs: &BTreeMap<PointId, String>,
) -> Result<String, EngineError> {
    let mut sections = Vec::with_capacity(dag.len());
    for kp in dag.points() {
        let body = outputs
            .get(&kp.id)
            .ok_or(EngineError::MissingOutput(kp.id))?;
        sections.push(format!("## {}\n{}", kp.title, body));
    }
    Ok(sections.join("\n\n"))
}

/// Everything a successful expansion produced.
#[derive(Debug)]
pub struct ExpansionRun<S: Scalar> {
    pub answer: String,
    pub outputs: BTreeMap<PointId, String>,
    pub timeline: Vec<TimelineEvent<S>>,
    pub makespan: S,
}

/// A failed expansion still reports the units that did run.
#[derive(Debug)]
pub struct ExpansionFailure<S: Scalar> {
    pub error: EngineError,
    pub timeline: Vec<TimelineEvent<S>>,
}

impl<S: Scalar> fmt::Display for ExpansionFailure<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} units completed)", self.error, self.timeline.len())
    }
}

impl<S: Scalar> std::error::Error for ExpansionFailure<S> {}

/// Knobs for a single expansion run.
#[derive(Debug, Clone)]
pub struct ExpansionOptions {
    pub prompt: PromptConfig,
    /// [`Mode::DepExp`] gates on relations; [`Mode::ParExp`] drops them.
    pub mode: Mode,
    pub seed: u64,
    pub max_tokens: Option<usize>,
    /// Simulator script key prefix; point calls use `<prefix>::point:<id>`.
    pub script_prefix: Option<String>,
    /// Run on OS threads against the wall clock instead of the simulated
    /// clock. Content is identical either way.
    pub wall_clock: bool,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        ExpansionOptions {
            prompt: PromptConfig::default(),
            mode: Mode::DepExp,
            seed: 0,
            max_tokens: None,
            script_prefix: None,
            wall_clock: false,
        }
    }
}

/// Expands every point of `dag` over `backend`, launching units as their
/// gates open, bounded by `caps`. Returns the merged answer and the unit
/// timeline; on backend failure the timeline of completed units survives in
/// the error.
pub fn run_expansion<S: Scalar>(
    dag: &PointDag,
    backend: Arc<dyn GenerationBackend<S>>,
    caps: Capacities,
    opts: &ExpansionOptions,
) -> Result<ExpansionRun<S>, ExpansionFailure<S>> {
    if opts.wall_clock {
        drive(ThreadExecutor::new(backend), dag, caps, opts)
    } else {
        drive(SimExecutor::new(backend, S::zero()), dag, caps, opts)
    }
}

fn drive<S: Scalar, E: Executor<S>>(
    executor: E,
    dag: &PointDag,
    caps: Capacities,
    opts: &ExpansionOptions,
) -> Result<ExpansionRun<S>, ExpansionFailure<S>> {
    let mut runner = PipelineRunner::new(executor, caps).with_prompt(opts.prompt.clone());
    let mut spec = QuerySpec::new("single", "").with_mode(opts.mode).with_seed(opts.seed);
    spec.script_prefix = opts.script_prefix.clone();
    spec.max_tokens = opts.max_tokens;
    runner
        .submit_with_dag(spec, dag.clone())
        .expect("fresh runner accepts one job");
    runner.run();
    let mut batch = runner.take_results();
    let job = batch.jobs.pop().expect("one job was submitted");
    let mut timeline = job.timeline;
    for ev in &mut timeline {
        ev.job = None;
    }
    let makespan = batch.makespan;
    match job.answer {
        Ok(answer) => Ok(ExpansionRun {
            answer,
            outputs: job.outputs,
            timeline,
            makespan,
        }),
        Err(error) => Err(ExpansionFailure { error, timeline }),
    }
}

/// The no-parallelism reference: each point's call runs to completion before
/// the next starts, in ascending point id order, on a simulated clock.
/// Prompts and outputs match [`run_expansion`] exactly.
pub fn run_sequential_baseline<S: Scalar>(
    dag: &PointDag,
    backend: Arc<dyn GenerationBackend<S>>,
    opts: &ExpansionOptions,
) -> Result<ExpansionRun<S>, ExpansionFailure<S>> {
    let mut outputs: BTreeMap<PointId, String> = BTreeMap::new();
    let mut timeline: Vec<TimelineEvent<S>> = Vec::new();
    let mut now = S::zero();
    let fail = |error: EngineError, timeline: &[TimelineEvent<S>]| ExpansionFailure {
        error,
        timeline: timeline.to_vec(),
    };

    for kp in dag.points() {
        let input = assemble_expansion_input(kp.id, dag, &outputs, &opts.prompt)
            .map_err(|e| fail(e.into(), &timeline))?;
        let mut req = GenerationRequest::new(input.render())
            .with_phase(PhaseHint::Prefill)
            .with_seed(opts.seed);
        if let Some(prefix) = &opts.script_prefix {
            req = req.with_script_key(format!("{prefix}::point:{}", kp.id));
        }
        if let Some(n) = opts.max_tokens {
            req = req.with_max_tokens(n);
        }
        let res = backend.generate(&req, &mut |_| {}).map_err(|e| {
            fail(
                EngineError::BackendFailure {
                    point: kp.id,
                    phase: Phase::Prefill,
                    source: e,
                },
                &timeline,
            )
        })?;
        let boundary = now + res.prefill_time;
        let end = boundary + res.decode_time;
        for (key, start, stop) in [
            (StageKey::PointPrefill(kp.id), now, boundary),
            (StageKey::PointDecode(kp.id), boundary, end),
        ] {
            timeline.push(TimelineEvent {
                job: None,
                stage: key.label(),
                start,
                end: stop,
                class: key.class(),
            });
        }
        outputs.insert(kp.id, res.text);
        now = end;
    }

    let answer = merge_outputs(dag, &outputs).map_err(|e| fail(e, &timeline))?;
    Ok(ExpansionRun {
        answer,
        outputs,
        timeline,
        makespan: now,
    })
}
