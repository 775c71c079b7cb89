//! Scripted workload families for benches and tests.
//!
//! Each family builds a batch of queries whose decompositions, point
//! outputs and whole-answer outputs are fully scripted on a [`SimBackend`],
//! so every mode runs deterministically and token counts are exact:
//!
//! * [`Family::Independent`] — every point is a root (no edges); the pure
//!   fan-out case where parallel expansion shines.
//! * [`Family::ContextChain`] — each point needs the previous point's
//!   statement (prefill gate only).
//! * [`Family::DependentChain`] — each point needs the previous point's
//!   generated output (decode gate). Scripts here are keyed by prompt text,
//!   so a mode that drops the parent's result gets visibly different
//!   content, which is what the ablation checks measure.
//!
//! In every family the whole-answer script equals the merged expansion
//! byte-for-byte, so content comparisons across modes are exact.

use crate::backend::{GenerationBackend, SimBackend, SimCostModel};
use crate::dag::{build_point_dag, EdgeKind, PointDag, PointId, Relation};
use crate::engine::{merge_outputs, Mode};
use crate::exec::Capacities;
use crate::metrics::{apply_speedups, MetricsError, RunReport};
use crate::num::Scalar;
use crate::pipeline::{run_batch, QuerySpec};
use crate::prompt::{
    assemble_expansion_input, assemble_generation_prompt, whole_answer_prompt, PromptConfig,
};
use crate::stream::{DepRecord, KeyPointRecord};
use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

/// Dependency shape of a synthetic batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// All points independent: no relations at all.
    Independent,
    /// Point k+1 contextually depends on point k.
    ContextChain,
    /// Point k+1 depends on point k's generated output.
    DependentChain,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Independent => "independent",
            Family::ContextChain => "context-chain",
            Family::DependentChain => "dependent-chain",
        }
    }

    fn kind(self) -> Option<EdgeKind> {
        match self {
            Family::Independent => None,
            Family::ContextChain => Some(EdgeKind::Contextual),
            Family::DependentChain => Some(EdgeKind::Dependent),
        }
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "independent" => Ok(Family::Independent),
            "context-chain" => Ok(Family::ContextChain),
            "dependent-chain" => Ok(Family::DependentChain),
            other => Err(format!(
                "unknown workload family `{other}` (expected independent, \
                 context-chain or dependent-chain)"
            )),
        }
    }
}

/// Size and shape of a synthetic batch.
#[derive(Debug, Clone, Copy)]
pub struct WorkloadSpec {
    pub family: Family,
    pub queries: usize,
    pub points: usize,
    /// Exact whitespace-token length of every point's scripted output.
    pub tokens_per_point: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            family: Family::Independent,
            queries: 4,
            points: 4,
            tokens_per_point: 100,
        }
    }
}

/// What the generator predicted for one query; tests and acceptance checks
/// compare run output against these.
#[derive(Debug, Clone)]
pub struct ExpectedQuery {
    pub query_id: String,
    pub dag: PointDag,
    /// Scripted per-point outputs, exactly `tokens_per_point` tokens each.
    pub outputs: BTreeMap<PointId, String>,
    /// The merged answer; also the whole-answer script.
    pub merged: String,
    /// Compact decomposition JSON (a single whitespace token).
    pub decomposition: String,
}

/// A ready-to-run batch: query specs, a fully scripted backend, and the
/// expected content per query.
pub struct Workload<S: Scalar> {
    specs: Vec<QuerySpec>,
    pub backend: Arc<SimBackend<S>>,
    pub prompt: PromptConfig,
    pub search_time: S,
    pub expected: Vec<ExpectedQuery>,
}

impl<S: Scalar> Workload<S> {
    /// The batch with every query set to `mode`.
    pub fn specs_for(&self, mode: Mode) -> Vec<QuerySpec> {
        self.specs
            .iter()
            .map(|s| s.clone().with_mode(mode))
            .collect()
    }
}

/// Builds a fully scripted batch with default simulator costs.
pub fn build_workload<S: Scalar>(spec: &WorkloadSpec) -> Workload<S> {
    build_workload_with(spec, SimCostModel::default())
}

pub fn build_workload_with<S: Scalar>(
    spec: &WorkloadSpec,
    cost: SimCostModel<S>,
) -> Workload<S> {
    assert!(spec.queries > 0 && spec.points > 0 && spec.tokens_per_point > 0);
    let prompt = PromptConfig::default();
    let mut backend = SimBackend::new(cost);
    // Prompt-keyed scripts must fall back to the synthesizer when a mode
    // assembles a prompt the generator did not anticipate; key-scripted
    // families never miss, so they run strict.
    backend.set_strict(spec.family != Family::DependentChain);
    let mut specs = Vec::with_capacity(spec.queries);
    let mut expected = Vec::with_capacity(spec.queries);

    for q in 1..=spec.queries {
        let query_id = format!("q{q}");
        let query = format!(
            "synthetic query {q}: expand {} {} sections of {} tokens each",
            spec.points,
            spec.family.as_str(),
            spec.tokens_per_point
        );

        // Point texts are hyphenated single tokens so the compact
        // decomposition JSON stays one whitespace token. They carry the
        // query number because expansion prompts contain no query text:
        // two queries with identical instructions would share prompts, and
        // prompt-keyed scripts would collide.
        let records: Vec<KeyPointRecord> = (1..=spec.points)
            .map(|p| KeyPointRecord {
                id: p as i64,
                point: format!("q{q}-cover-part-{p}"),
                deps: match (spec.family.kind(), p) {
                    (Some(kind), p) if p > 1 => vec![DepRecord {
                        on: (p - 1) as i64,
                        kind: match kind {
                            EdgeKind::Contextual => "contextual".to_string(),
                            EdgeKind::Dependent => "dependent".to_string(),
                            EdgeKind::Null => "none".to_string(),
                        },
                    }],
                    _ => Vec::new(),
                },
            })
            .collect();
        let decomposition =
            serde_json::to_string(&records).expect("records serialize compactly");

        let points: Vec<_> = records
            .iter()
            .map(|r| crate::dag::KeyPoint {
                id: r.id as PointId,
                title: r.point.clone(),
                instruction: r.point.clone(),
            })
            .collect();
        let relations: Vec<Relation> = records
            .iter()
            .flat_map(|r| {
                r.deps.iter().map(|d| Relation {
                    from: d.on as PointId,
                    to: r.id as PointId,
                    kind: if d.kind == "contextual" {
                        EdgeKind::Contextual
                    } else {
                        EdgeKind::Dependent
                    },
                })
            })
            .collect();
        let dag = build_point_dag(points, relations).expect("generated graphs are valid");

        // Exact-length bodies, unique per query and point.
        let mut outputs: BTreeMap<PointId, String> = BTreeMap::new();
        for p in 1..=spec.points as PointId {
            let body: Vec<String> = (0..spec.tokens_per_point)
                .map(|k| format!("q{q}p{p}w{k}"))
                .collect();
            outputs.insert(p, body.join(" "));
        }
        let merged = merge_outputs(&dag, &outputs).expect("all outputs present");

        let mut qspec = QuerySpec::new(query_id.clone(), query.clone());
        match spec.family {
            Family::Independent | Family::ContextChain => {
                // Key-addressed scripts: content is mode-independent.
                let prefix = &query_id;
                backend.script(format!("{prefix}::keypoints"), decomposition.clone());
                for (p, body) in &outputs {
                    backend.script(format!("{prefix}::point:{p}"), body.clone());
                }
                backend.script(format!("{prefix}::whole"), merged.clone());
                qspec = qspec.with_script_prefix(prefix.clone());
            }
            Family::DependentChain => {
                // Prompt-addressed scripts: only the dependency-respecting
                // prompts are registered, so a mode that drops parent
                // results diverges to synthesized filler.
                let decompose_prompt =
                    assemble_generation_prompt(&query, &[], &prompt.decompose)
                        .expect("default template has exemplars");
                backend.prompt_script(decompose_prompt, decomposition.clone());
                let mut seen: BTreeMap<PointId, String> = BTreeMap::new();
                for p in 1..=spec.points as PointId {
                    let input = assemble_expansion_input(p, &dag, &seen, &prompt)
                        .expect("chain order satisfies every gate");
                    backend.prompt_script(input.render(), outputs[&p].clone());
                    seen.insert(p, outputs[&p].clone());
                }
                backend.prompt_script(
                    whole_answer_prompt(&query, &[], &prompt),
                    merged.clone(),
                );
            }
        }
        specs.push(qspec);
        expected.push(ExpectedQuery {
            query_id,
            dag,
            outputs,
            merged,
            decomposition,
        });
    }

    let search_time = backend.cost_model().search_cost;
    Workload {
        specs,
        backend: Arc::new(backend),
        prompt,
        search_time,
        expected,
    }
}

/// Runs the workload once per mode and fills in speedups against Normal.
pub fn run_ablation<S: Scalar>(
    workload: &Workload<S>,
    modes: &[Mode],
    caps: Capacities,
) -> Result<Vec<RunReport<S>>, MetricsError> {
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        let backend: Arc<dyn GenerationBackend<S>> = workload.backend.clone();
        let batch = run_batch(
            workload.specs_for(mode),
            backend,
            caps,
            workload.prompt.clone(),
            None,
            workload.search_time,
        )
        .expect("batch runner is sized to the spec list");
        reports.push(RunReport::from_batch(mode, &batch));
    }
    apply_speedups(&mut reports)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::count_tokens;

    fn small(family: Family) -> WorkloadSpec {
        WorkloadSpec {
            family,
            queries: 2,
            points: 3,
            tokens_per_point: 8,
        }
    }

    #[test]
    fn scripted_sizes_are_exact() {
        let w: Workload<f64> = build_workload(&small(Family::Independent));
        for exp in &w.expected {
            assert_eq!(count_tokens(&exp.decomposition), 1, "compact JSON");
            for body in exp.outputs.values() {
                assert_eq!(count_tokens(body), 8);
            }
            // Merged adds a two-token header per section.
            assert_eq!(count_tokens(&exp.merged), 3 * (8 + 2));
        }
    }

    #[test]
    fn expansion_reproduces_expected_content() {
        let w: Workload<f64> = build_workload(&small(Family::Independent));
        let reports = run_ablation(&w, &[Mode::Normal, Mode::DepExp], Capacities::default())
            .unwrap();
        for report in &reports {
            for (stat, exp) in report.queries.iter().zip(&w.expected) {
                assert_eq!(stat.query_id, exp.query_id);
                assert_eq!(stat.answer, exp.merged, "{} answer", report.mode);
            }
        }
        // Whole-answer output token counts exceed the per-point total by
        // exactly the section headers.
        let normal_tokens = reports[0].queries[0].tokens;
        let depexp_tokens = reports[1].queries[0].tokens;
        assert_eq!(normal_tokens, 3 * (8 + 2));
        // DepExp additionally counts the one-token decomposition.
        assert_eq!(depexp_tokens, 3 * 8 + 1);
    }

    #[test]
    fn dependent_chain_rewards_dependency_order() {
        let w: Workload<f64> = build_workload(&small(Family::DependentChain));
        let reports = run_ablation(
            &w,
            &[Mode::Normal, Mode::ParExp, Mode::DepExp],
            Capacities::default(),
        )
        .unwrap();
        let exp = &w.expected[0];
        let normal = &reports[0].queries[0].answer;
        let parexp = &reports[1].queries[0].answer;
        let depexp = &reports[2].queries[0].answer;

        assert_eq!(depexp, &exp.merged, "gated expansion hits every script");
        assert_eq!(normal, &exp.merged, "whole answer is the same bytes");
        assert_ne!(parexp, &exp.merged, "ungated expansion diverges");
        // The root's prompt is identical either way; children differ once
        // the parent's result is dropped from their prompts.
        assert!(parexp.contains("q1p1w0"));
        assert!(!parexp.contains("q1p2w0"));
        assert!(depexp.contains("q1p2w0"));
    }

    #[test]
    fn context_chain_gates_on_prefill_only() {
        let w: Workload<f64> = build_workload(&small(Family::ContextChain));
        let reports = run_ablation(&w, &[Mode::DepExp], Capacities::default()).unwrap();
        let t = &reports[0].timeline;
        let span = |job: u32, stage: &str| {
            let e = t
                .iter()
                .find(|e| e.job == Some(job) && e.stage == stage)
                .unwrap_or_else(|| panic!("missing {stage}"));
            (e.start, e.end)
        };
        let pre2 = span(1, "Pre:2");
        let pre1 = span(1, "Pre:1");
        let dec1 = span(1, "Dec:1");
        assert!(pre2.0 >= pre1.1, "waits for the parent statement");
        assert!(pre2.0 < dec1.1, "does not wait for the parent's decode");
    }

    #[test]
    fn family_names_round_trip() {
        for family in [
            Family::Independent,
            Family::ContextChain,
            Family::DependentChain,
        ] {
            assert_eq!(family.as_str().parse::<Family>().unwrap(), family);
        }
        assert!("chained".parse::<Family>().is_err());
    }
}
