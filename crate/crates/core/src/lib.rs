//! Dependency-aware decomposition and parallel expansion of reasoning
//! queries.
//!
//! The engine answers a query in two model passes instead of one long
//! generation. A *decomposition* pass lists the key points of the answer and
//! how each point relates to the ones before it (needs their finished output,
//! only needs their statement, or nothing at all). An *expansion* pass then
//! writes every point as its own generation call, and because the relations
//! are explicit, independent points run in parallel while dependent ones wait
//! exactly as long as they must.
//!
//! Module map:
//!
//! * [`dag`] — typed point graphs and their prefill/decode stage rewrite;
//! * [`stream`] — incremental parser for the decomposition wire format;
//! * [`retrieval`] — corpus chunking, hashed embeddings, cosine search;
//! * [`prompt`] — prompt assembly for all three prompt families;
//! * [`backend`] — the generation seam: a deterministic simulator and a
//!   streaming HTTP client;
//! * [`exec`] — resource classes, the unit timeline, and executors that run
//!   launches on a simulated or the real clock;
//! * [`engine`] — single-query expansion: gating, merging, baselines;
//! * [`pipeline`] — multi-query scheduling across search, compute and
//!   bandwidth slots;
//! * [`metrics`] — run reports, speedups and file emission;
//! * [`workload`] — scripted workload families used by benches and tests.
//!
//! Numeric code is generic over [`Scalar`] (any float that serde and
//! `num-traits` agree on); `f64` aliases are provided for the common case.

pub mod backend;
pub mod dag;
pub mod engine;
pub mod exec;
pub mod metrics;
pub mod num;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod stream;
pub mod workload;

pub use dag::{
    build_point_dag, expand_to_stage_graph, ready_set, topological_wavefronts, DagError, EdgeKind,
    KeyPoint, Phase, PointDag, PointId, Relation, StageGraph, StageNode,
};
pub use engine::{
    merge_outputs, run_expansion, run_sequential_baseline, EngineError, ExpansionOptions, Mode,
};
pub use exec::{Capacities, Executor, JobId, ResourceClass, StageKey};
pub use metrics::{apply_speedups, emit_reports, latency_report, speedup_ratio, MetricsError};
pub use num::Scalar;
pub use pipeline::{run_batch, PipelineError, PipelineRunner, QuerySpec};
pub use stream::{parse_points, to_domain, DomainPoints, KeyPointRecord, PointStreamParser};
pub use workload::{build_workload, run_ablation, Family, WorkloadSpec};

/// Scalar used by the binaries and the default type aliases.
pub type DefaultScalar = f64;

/// Common concrete instantiations.
pub type SimBackend = backend::SimBackend<DefaultScalar>;
pub type SimCostModel = backend::SimCostModel<DefaultScalar>;
pub type GenerationResult = backend::GenerationResult<DefaultScalar>;
pub type Retriever = retrieval::Retriever<DefaultScalar>;
pub type SimExecutor = exec::SimExecutor<DefaultScalar>;
pub type ThreadExecutor = exec::ThreadExecutor<DefaultScalar>;
pub type TimelineEvent = exec::TimelineEvent<DefaultScalar>;
pub type ExpansionRun = engine::ExpansionRun<DefaultScalar>;
pub type RunReport = metrics::RunReport<DefaultScalar>;
pub type BatchResult = pipeline::BatchResult<DefaultScalar>;
pub type Workload = workload::Workload<DefaultScalar>;
