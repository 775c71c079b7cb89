//! Command-line and service front end for the expansion engine. The binary
//! exposes four operations: `run` answers one query, `bench` runs the
//! scripted workload families across modes and writes reports, `serve`
//! exposes the pipeline over HTTP, and `dag` pretty-prints the graphs a
//! decomposition file produces.

pub mod config;
pub mod service;

pub use config::{load_config, split_dotted_overrides, Config};

use anyhow::Context;
use fanout_core::backend::GenerationBackend;
use fanout_core::engine::{EngineError, Mode};
use fanout_core::exec::{Capacities, ThreadExecutor};
use fanout_core::metrics::{apply_speedups, emit_reports, latency_report, RunReport};
use fanout_core::pipeline::{run_batch, BatchResult, PipelineRunner, QuerySpec};
use fanout_core::prompt::PromptConfig;
use fanout_core::workload::{build_workload_with, run_ablation, Family, WorkloadSpec};
use fanout_core::{build_point_dag, expand_to_stage_graph, parse_points, DagError, Retriever};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Errors with the process exit code they map to: configuration and usage
/// problems exit 2, backend and generation failures exit 3, parse and graph
/// problems in model output or input files exit 4.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Backend(anyhow::Error),
    Parse(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Parse(_) => 4,
        }
    }

    fn inner(&self) -> &anyhow::Error {
        match self {
            CliError::Config(e) | CliError::Backend(e) | CliError::Parse(e) => e,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.inner())
    }
}

impl std::error::Error for CliError {}

/// Sorts an engine failure into the exit-code buckets.
fn classify(e: EngineError) -> CliError {
    match e {
        EngineError::Parse(_) | EngineError::Graph(_) => CliError::Parse(e.into()),
        EngineError::Prompt(_) | EngineError::Retrieval(_) => CliError::Config(e.into()),
        EngineError::BackendFailure { .. }
        | EngineError::DecompositionFailure { .. }
        | EngineError::BaselineFailure { .. }
        | EngineError::MissingOutput(_)
        | EngineError::Internal(_) => CliError::Backend(e.into()),
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Config(e.into())
}

/// Everything a command needs to execute queries, built once from config.
pub struct Session {
    pub backend: Arc<dyn GenerationBackend<f64>>,
    pub caps: Capacities,
    pub prompt: PromptConfig,
    pub retriever: Option<Arc<Retriever>>,
    pub search_time: f64,
    /// Simulated backends run on the logical clock; remote ones on the wall.
    pub wall_clock: bool,
}

impl Session {
    pub fn from_config(cfg: &Config) -> Result<Self, CliError> {
        Ok(Session {
            backend: cfg.build_backend().map_err(config_err)?,
            caps: cfg.capacities(),
            prompt: cfg.build_prompt().map_err(config_err)?,
            retriever: cfg.build_retriever().map_err(config_err)?,
            search_time: cfg.cost.search_cost,
            wall_clock: !cfg.is_sim(),
        })
    }

    /// Runs a batch to completion on the clock the backend calls for.
    pub fn run(&self, specs: Vec<QuerySpec>) -> Result<BatchResult<f64>, CliError> {
        if !self.wall_clock {
            return run_batch(
                specs,
                Arc::clone(&self.backend),
                self.caps,
                self.prompt.clone(),
                self.retriever.clone(),
                self.search_time,
            )
            .map_err(config_err);
        }
        let executor = ThreadExecutor::new(Arc::clone(&self.backend));
        let mut runner = PipelineRunner::new(executor, self.caps)
            .with_prompt(self.prompt.clone())
            .with_queue_bound(specs.len().max(1));
        if let Some(r) = &self.retriever {
            runner = runner.with_retriever(Arc::clone(r));
        }
        for spec in specs {
            runner.submit(spec).map_err(config_err)?;
        }
        runner.run();
        Ok(runner.take_results())
    }
}

/// What `run` produced, for printing and exit handling.
#[derive(Debug)]
pub struct RunOutcome {
    pub answer: String,
    /// Mode the final answer was produced in (differs from the requested
    /// mode only after a cycle fallback).
    pub mode: Mode,
    pub fallback: bool,
    pub warnings: Vec<String>,
    pub tokens: usize,
    pub elapsed: f64,
    pub files: Vec<PathBuf>,
}

/// Answers one query and writes the run artifacts under the output dir.
///
/// A decomposition that turns out cyclic is a model failure the user cannot
/// fix, so instead of erroring the query is re-answered as one whole
/// generation (with a warning); every other failure is reported with the
/// partial timeline already on disk.
pub fn cmd_run(cfg: &Config, query: &str, query_id: &str, mode: Mode) -> Result<RunOutcome, CliError> {
    let session = Session::from_config(cfg)?;
    let mut spec = QuerySpec::new(query_id, query)
        .with_mode(mode)
        .with_seed(cfg.seed)
        .with_script_prefix(query_id);
    if let Some(n) = cfg.max_tokens {
        spec = spec.with_max_tokens(n);
    }

    let mut mode_used = mode;
    let mut fallback = false;
    let mut batch = session.run(vec![spec.clone()])?;
    let cyclic = matches!(
        batch.jobs.first().map(|j| &j.answer),
        Some(Err(EngineError::Graph(DagError::CycleDetected { .. })))
    );
    if cyclic {
        log::warn!("decomposition of `{query_id}` is cyclic; falling back to a whole-answer run");
        mode_used = Mode::Normal;
        fallback = true;
        batch = session.run(vec![spec.with_mode(Mode::Normal)])?;
    }

    let mut reports = vec![RunReport::from_batch(mode_used, &batch)];
    // A lone run is its own baseline; a zero-rate run (nothing generated)
    // just keeps the default speedup of 1.
    let _ = apply_speedups(&mut reports);
    let files = emit_reports(&reports, &cfg.out_dir).map_err(config_err)?;

    let job = batch.jobs.into_iter().next().expect("one job per run");
    let mut warnings = job.warnings;
    if fallback {
        warnings.push("cyclic decomposition; answered without point expansion".to_string());
    }
    match job.answer {
        Ok(answer) => Ok(RunOutcome {
            answer,
            mode: mode_used,
            fallback,
            warnings,
            tokens: job.output_tokens,
            elapsed: job.elapsed,
            files,
        }),
        Err(e) => Err(classify(e)),
    }
}

/// What `bench` produced: one report per mode plus the files written.
pub struct BenchOutcome {
    pub reports: Vec<RunReport<f64>>,
    pub files: Vec<PathBuf>,
}

impl BenchOutcome {
    /// Plain-text table: one line per mode with makespan, rate and speedup.
    pub fn render_table(&self) -> String {
        let rows = latency_report(&self.reports).unwrap_or_default();
        let mut out = String::from(
            "mode     queries  tokens  makespan  tok/unit  speedup  latency-ratio\n",
        );
        for (report, row) in self.reports.iter().zip(rows) {
            out.push_str(&format!(
                "{:<8} {:>7} {:>7} {:>9.3} {:>9.3} {:>8.3} {:>14.3}\n",
                report.mode.as_str(),
                report.queries.len(),
                report.total_tokens(),
                report.makespan,
                report.token_rate(),
                report.speedup_vs_normal,
                row.latency_ratio,
            ));
        }
        out
    }
}

/// Runs a scripted workload family across modes and writes the reports.
pub fn cmd_bench(
    cfg: &Config,
    family: Family,
    queries: usize,
    points: usize,
    tokens_per_point: usize,
    modes: &[Mode],
) -> Result<BenchOutcome, CliError> {
    if modes.is_empty() {
        return Err(CliError::Config(anyhow::anyhow!("no modes requested")));
    }
    let spec = WorkloadSpec {
        family,
        queries,
        points,
        tokens_per_point,
    };
    let workload = build_workload_with(&spec, cfg.cost_model());
    let reports =
        run_ablation(&workload, modes, cfg.capacities()).map_err(|e| CliError::Backend(e.into()))?;
    let files = emit_reports(&reports, &cfg.out_dir).map_err(config_err)?;
    Ok(BenchOutcome { reports, files })
}

/// Renders the point graph, its stage rewrite and the parallel wavefronts
/// for a decomposition file (same wire format the model emits).
pub fn cmd_dag(points_file: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(points_file)
        .with_context(|| format!("cannot read {}", points_file.display()))
        .map_err(config_err)?;
    let domain = parse_points(&text).map_err(|e| CliError::Parse(e.into()))?;
    let dag = build_point_dag(domain.points, domain.relations)
        .map_err(|e| CliError::Parse(e.into()))?;
    let stage = expand_to_stage_graph(&dag);

    let mut out = String::from("points:\n");
    for p in dag.points() {
        let parents = dag.parents(p.id);
        if parents.is_empty() {
            out.push_str(&format!("  {}: {} (no prerequisites)\n", p.id, p.title));
        } else {
            let deps: Vec<String> = parents
                .iter()
                .map(|r| {
                    let kind = match r.kind {
                        fanout_core::EdgeKind::Null => "none",
                        fanout_core::EdgeKind::Contextual => "contextual",
                        fanout_core::EdgeKind::Dependent => "dependent",
                    };
                    format!("{} ({kind})", r.from)
                })
                .collect();
            out.push_str(&format!("  {}: {} <- {}\n", p.id, p.title, deps.join(", ")));
        }
    }
    for w in domain.warnings {
        out.push_str(&format!("  warning: {w}\n"));
    }
    out.push_str("stage edges:\n");
    for (from, to) in stage.edges() {
        out.push_str(&format!("  {from} -> {to}\n"));
    }
    out.push_str("wavefronts:\n");
    for (i, wave) in dag.wavefronts().iter().enumerate() {
        let ids: Vec<String> = wave.iter().map(|id| id.to_string()).collect();
        out.push_str(&format!("  {}: [{}]\n", i, ids.join(", ")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_config(dir: &Path) -> Config {
        let mut cfg = Config::default();
        cfg.out_dir = dir.join("out");
        cfg
    }

    fn scripted_config(dir: &Path, scripts: serde_json::Value) -> Config {
        let path = dir.join("scripts.json");
        std::fs::write(&path, scripts.to_string()).unwrap();
        let mut cfg = sim_config(dir);
        cfg.backend.script_file = Some(path);
        cfg
    }

    #[test]
    fn run_answers_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = scripted_config(
            dir.path(),
            serde_json::json!({
                "keys": {
                    "q1::keypoints":
                        r#"[{"id":1,"point":"alpha","deps":[]},
                            {"id":2,"point":"beta","deps":[{"on":1,"kind":"dependent"}]}]"#,
                    "q1::point:1": "first body",
                    "q1::point:2": "second body"
                }
            }),
        );
        let out = cmd_run(&cfg, "how?", "q1", Mode::DepExp).unwrap();
        assert!(out.answer.contains("## alpha\nfirst body"));
        assert!(out.answer.contains("## beta\nsecond body"));
        assert!(!out.fallback);
        assert!(cfg.out_dir.join("timeline_depexp.jsonl").exists());
        assert!(cfg.out_dir.join("answers/depexp/q1.txt").exists());
        let saved = std::fs::read_to_string(cfg.out_dir.join("answers/depexp/q1.txt")).unwrap();
        assert_eq!(saved, out.answer);
    }

    #[test]
    fn cyclic_decomposition_falls_back_to_whole_answer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = scripted_config(
            dir.path(),
            serde_json::json!({
                "keys": {
                    "q1::keypoints":
                        r#"[{"id":1,"point":"alpha","deps":[{"on":2,"kind":"dependent"}]},
                            {"id":2,"point":"beta","deps":[{"on":1,"kind":"dependent"}]}]"#,
                    "q1::whole": "the whole answer instead"
                }
            }),
        );
        let out = cmd_run(&cfg, "how?", "q1", Mode::DepExp).unwrap();
        assert!(out.fallback);
        assert_eq!(out.mode, Mode::Normal);
        assert_eq!(out.answer, "the whole answer instead");
        assert!(out.warnings.iter().any(|w| w.contains("cyclic")));
        assert!(cfg.out_dir.join("answers/normal/q1.txt").exists());
    }

    #[test]
    fn backend_failures_keep_their_exit_code_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = scripted_config(
            dir.path(),
            serde_json::json!({
                "keys": {
                    "q1::keypoints": r#"[{"id":1,"point":"alpha","deps":[]}]"#
                }
            }),
        );
        cfg.backend.strict = true; // point expansion has no script -> failure
        let err = cmd_run(&cfg, "how?", "q1", Mode::DepExp).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(cfg.out_dir.join("timeline_depexp.jsonl").exists());
        let saved = std::fs::read_to_string(cfg.out_dir.join("answers/depexp/q1.txt")).unwrap();
        assert!(saved.starts_with("ERROR:"), "failure artifact: {saved}");
    }

    #[test]
    fn parexp_and_depexp_runs_schedule_differently() {
        let dir = tempfile::tempdir().unwrap();
        let scripts = serde_json::json!({
            "keys": {
                "q1::keypoints":
                    r#"[{"id":1,"point":"alpha","deps":[]},
                        {"id":2,"point":"beta","deps":[{"on":1,"kind":"dependent"}]}]"#,
                "q1::point:1": "one one one",
                "q1::point:2": "two two two"
            }
        });
        let cfg_dep = scripted_config(dir.path(), scripts.clone());
        let dep = cmd_run(&cfg_dep, "how?", "q1", Mode::DepExp).unwrap();
        let dep_timeline =
            std::fs::read_to_string(cfg_dep.out_dir.join("timeline_depexp.jsonl")).unwrap();

        let dir2 = tempfile::tempdir().unwrap();
        let cfg_par = scripted_config(dir2.path(), scripts);
        let par = cmd_run(&cfg_par, "how?", "q1", Mode::ParExp).unwrap();
        let par_timeline =
            std::fs::read_to_string(cfg_par.out_dir.join("timeline_parexp.jsonl")).unwrap();

        assert_eq!(dep.answer, par.answer, "same scripted content either way");
        assert_ne!(dep_timeline, par_timeline, "but the schedules differ");
        assert!(par.elapsed < dep.elapsed, "ignoring the edge finishes sooner");
    }

    #[test]
    fn bench_produces_reports_for_every_mode() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = sim_config(dir.path());
        let out = cmd_bench(
            &cfg,
            Family::Independent,
            2,
            3,
            10,
            &[Mode::Normal, Mode::DepExp],
        )
        .unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.reports[0].mode, Mode::Normal);
        assert!(out.reports[1].speedup_vs_normal > 1.0);
        assert!(cfg.out_dir.join("summary.csv").exists());
        assert!(cfg.out_dir.join("latency.csv").exists());
        let table = out.render_table();
        assert!(table.contains("normal"), "table lists modes: {table}");
        assert!(table.contains("depexp"));
    }

    #[test]
    fn dag_rendering_names_every_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.json");
        std::fs::write(
            &path,
            r#"[{"id":1,"point":"alpha","deps":[]},
                {"id":2,"point":"beta","deps":[{"on":1,"kind":"contextual"}]},
                {"id":3,"point":"gamma","deps":[{"on":1,"kind":"none"}]}]"#,
        )
        .unwrap();
        let text = cmd_dag(&path).unwrap();
        assert!(text.contains("1: alpha (no prerequisites)"));
        assert!(text.contains("2: beta <- 1 (contextual)"));
        assert!(text.contains("3: gamma (no prerequisites)"), "none edges vanish");
        assert!(text.contains("Pre:1 -> Pre:2"), "contextual gates prefill");
        assert!(text.contains("Pre:1 -> Dec:1"));
        assert!(text.contains("0: [1, 3]"));
        assert!(text.contains("1: [2]"));
    }

    #[test]
    fn dag_errors_use_the_parse_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.json");
        std::fs::write(&path, "not a decomposition at all").unwrap();
        assert_eq!(cmd_dag(&path).unwrap_err().exit_code(), 4);

        std::fs::write(
            &path,
            r#"[{"id":1,"point":"a","deps":[{"on":2,"kind":"dependent"}]},
                {"id":2,"point":"b","deps":[{"on":1,"kind":"dependent"}]}]"#,
        )
        .unwrap();
        assert_eq!(cmd_dag(&path).unwrap_err().exit_code(), 4);
    }
}
