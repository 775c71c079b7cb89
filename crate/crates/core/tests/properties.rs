//! Randomized cross-module properties: the streaming parser against
//! fragmentation, the stage rewrite against an independent rule applier,
//! ready-set scheduling against a brute-force dependency oracle, parallel
//! expansion against the sequential baseline, and indexed retrieval against
//! a full scan.

use fanout_core::backend::{SimBackend, SimCostModel};
use fanout_core::dag::{
    build_point_dag, expand_to_stage_graph, ready_set, EdgeKind, KeyPoint, PointDag, PointId,
    Relation, StageNode,
};
use fanout_core::engine::{run_expansion, run_sequential_baseline, ExpansionOptions};
use fanout_core::exec::{Capacities, ResourceClass, TimelineEvent};
use fanout_core::prompt::{assemble_expansion_input, PromptConfig};
use fanout_core::retrieval::{ChunkSpec, Corpus, HashEmbedder, Retriever, TextEmbedder};
use fanout_core::stream::{parse_points, KeyPointRecord, PointStreamParser};
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

// ---------------------------------------------------------------- helpers

/// A dependency edit: which earlier point a record leans on, and how.
#[derive(Debug, Clone)]
struct RawDep {
    back: usize, // 1-based distance to an earlier record
    kind: u8,    // 0 none, 1 contextual, 2 dependent
}

/// Raw material for a record list whose ids are 1..=n and whose deps only
/// reference earlier ids, so the graph is a DAG by construction.
fn arb_raw_points() -> impl Strategy<Value = Vec<(String, Vec<RawDep>)>> {
    let word = "[a-z]{2,8}";
    let text = proptest::collection::vec(word.prop_map(String::from), 1..6)
        .prop_map(|ws| ws.join(" "));
    let dep = (1usize..12, 0u8..3).prop_map(|(back, kind)| RawDep { back, kind });
    proptest::collection::vec((text, proptest::collection::vec(dep, 0..3)), 1..10)
}

fn to_records(raw: &[(String, Vec<RawDep>)]) -> Vec<KeyPointRecord> {
    raw.iter()
        .enumerate()
        .map(|(idx, (text, deps))| {
            let id = (idx + 1) as i64;
            let deps = deps
                .iter()
                .filter(|d| d.back <= idx)
                .map(|d| fanout_core::stream::DepRecord {
                    on: id - d.back as i64,
                    kind: match d.kind {
                        0 => "none",
                        1 => "contextual",
                        _ => "dependent",
                    }
                    .to_string(),
                })
                .collect();
            KeyPointRecord {
                id,
                point: text.clone(),
                deps,
            }
        })
        .collect()
}

fn dag_from_records(records: &[KeyPointRecord]) -> PointDag {
    let json = serde_json::to_string(records).unwrap();
    let parsed = parse_points(&json).unwrap();
    build_point_dag(parsed.points, parsed.relations).unwrap()
}

// ----------------------------------------------------------------- parser

proptest! {
    /// Feeding a stream in any fragmentation — byte sizes chosen at random,
    /// including pathological one-byte feeds — yields the records of a
    /// single-shot parse, regardless of surrounding prose.
    #[test]
    fn parser_is_fragmentation_invariant(
        raw in arb_raw_points(),
        cuts in proptest::collection::vec(1usize..40, 0..30),
        prose in "[a-zA-Z ,.:\n]{0,40}",
    ) {
        let records = to_records(&raw);
        let stream = format!("{prose}{}{prose}", serde_json::to_string(&records).unwrap());

        let whole = parse_points(&stream).unwrap();

        let mut parser = PointStreamParser::new();
        let mut collected = Vec::new();
        let mut rest = stream.as_str();
        for cut in cuts {
            if rest.is_empty() {
                break;
            }
            let mut at = cut.min(rest.len());
            while !rest.is_char_boundary(at) {
                at += 1;
            }
            let (chunk, tail) = rest.split_at(at);
            collected.extend(parser.feed(chunk).unwrap());
            rest = tail;
        }
        collected.extend(parser.feed(rest).unwrap());
        parser.finalize().unwrap();

        let rejoined = fanout_core::stream::to_domain(&collected).unwrap();
        prop_assert_eq!(rejoined.points, whole.points);
        prop_assert_eq!(rejoined.relations, whole.relations);
    }
}

// -------------------------------------------------------------- stage DAG

proptest! {
    /// The stage rewrite contains exactly the edges an independently coded
    /// rule applier produces: Pre(i)→Dec(i) for every point, Pre(k)→Pre(j)
    /// per contextual relation, Dec(k)→Pre(j) per dependent relation.
    #[test]
    fn stage_edges_match_an_independent_rule_applier(raw in arb_raw_points()) {
        let records = to_records(&raw);
        let dag = dag_from_records(&records);
        let graph = expand_to_stage_graph(&dag);

        let mut expected: BTreeSet<(StageNode, StageNode)> = BTreeSet::new();
        for kp in dag.points() {
            expected.insert((StageNode::prefill(kp.id), StageNode::decode(kp.id)));
        }
        for rel in dag.edges() {
            let edge = match rel.kind {
                EdgeKind::Contextual => (StageNode::prefill(rel.from), StageNode::prefill(rel.to)),
                EdgeKind::Dependent => (StageNode::decode(rel.from), StageNode::prefill(rel.to)),
                EdgeKind::Null => unreachable!("null relations never materialize"),
            };
            expected.insert(edge);
        }
        let actual: BTreeSet<(StageNode, StageNode)> = graph.edges().into_iter().collect();
        prop_assert_eq!(actual, expected);
    }

    /// Walking the graph with ready_set + mark-complete visits every stage
    /// exactly once and never hands out a stage before its predecessors, as
    /// judged by a brute-force check of the predecessor lists.
    #[test]
    fn ready_walk_respects_dependencies_and_covers_every_stage(raw in arb_raw_points()) {
        let dag = dag_from_records(&to_records(&raw));
        let graph = expand_to_stage_graph(&dag);
        let mut completed: BTreeSet<StageNode> = BTreeSet::new();
        let mut visits: BTreeMap<StageNode, usize> = BTreeMap::new();

        while completed.len() < graph.nodes().len() {
            let ready = ready_set(&graph, &completed);
            prop_assert!(!ready.is_empty(), "acyclic graph never deadlocks");
            for node in &ready {
                prop_assert!(!completed.contains(node), "never re-issued");
                for pred in graph.predecessors(*node) {
                    prop_assert!(completed.contains(pred), "{pred} before {node}");
                }
                *visits.entry(*node).or_default() += 1;
            }

            // Monotonicity: completing one stage never revokes readiness.
            let mut grown = completed.clone();
            grown.insert(ready[0]);
            let after: BTreeSet<StageNode> = ready_set(&graph, &grown).into_iter().collect();
            for node in &ready {
                prop_assert!(
                    after.contains(node) || grown.contains(node),
                    "{node} stayed ready or completed"
                );
            }

            completed.extend(ready);
        }
        prop_assert!(visits.values().all(|&v| v == 1));
        prop_assert_eq!(visits.len(), graph.nodes().len());
    }
}

// ------------------------------------------------- expansion input branches

proptest! {
    /// Every parent relation contributes exactly one section of the matching
    /// kind: contextual parents inject their statement, dependent parents
    /// inject their finished output, and nothing else appears.
    #[test]
    fn expansion_input_sections_mirror_the_parent_relations(raw in arb_raw_points()) {
        let dag = dag_from_records(&to_records(&raw));
        let mut outputs: BTreeMap<PointId, String> = BTreeMap::new();
        for kp in dag.points() {
            outputs.insert(kp.id, format!("finished output of {}", kp.id));
        }
        let config = PromptConfig::default();

        for kp in dag.points() {
            let input = assemble_expansion_input(kp.id, &dag, &outputs, &config).unwrap();
            let expected: Vec<Relation> = dag.parents(kp.id).to_vec();
            prop_assert_eq!(input.parents.len(), expected.len());
            for (section, rel) in input.parents.iter().zip(&expected) {
                prop_assert_eq!(section.parent_id, rel.from);
                prop_assert_eq!(section.kind, rel.kind);
                match rel.kind {
                    EdgeKind::Contextual => {
                        let stmt = &dag.point(rel.from).unwrap().instruction;
                        prop_assert_eq!(&section.text, stmt, "statement, not output");
                    }
                    EdgeKind::Dependent => {
                        prop_assert_eq!(&section.text, &outputs[&rel.from]);
                    }
                    EdgeKind::Null => prop_assert!(false, "null never materializes"),
                }
            }
            let rendered = input.render();
            for section in &input.parents {
                let label = match section.kind {
                    EdgeKind::Contextual => format!("Context from point {}:", section.parent_id),
                    _ => format!("Result of point {}:", section.parent_id),
                };
                prop_assert!(rendered.contains(&label));
            }
        }
    }
}

// ----------------------------------------------- expansion vs. sequential

fn check_gating(dag: &PointDag, timeline: &[TimelineEvent<f64>]) {
    let span = |stage: &str| {
        let e = timeline
            .iter()
            .find(|e| e.stage == stage)
            .unwrap_or_else(|| panic!("missing stage {stage}"));
        (e.start, e.end)
    };
    for kp in dag.points() {
        let pre = span(&format!("Pre:{}", kp.id));
        let dec = span(&format!("Dec:{}", kp.id));
        assert!(dec.0 >= pre.1 - 1e-9, "decode after own prefill");
    }
    for rel in dag.edges() {
        let child = span(&format!("Pre:{}", rel.to));
        let gate = match rel.kind {
            EdgeKind::Contextual => span(&format!("Pre:{}", rel.from)).1,
            EdgeKind::Dependent => span(&format!("Dec:{}", rel.from)).1,
            EdgeKind::Null => unreachable!(),
        };
        assert!(
            child.0 >= gate - 1e-9,
            "{:?} edge {}→{} violated: child starts {} before gate {}",
            rel.kind,
            rel.from,
            rel.to,
            child.0,
            gate
        );
    }
}

fn check_capacity(timeline: &[TimelineEvent<f64>], caps: Capacities) {
    for class in ResourceClass::ALL {
        let mut deltas: Vec<(f64, i32)> = Vec::new();
        for e in timeline.iter().filter(|e| e.class == class) {
            deltas.push((e.start, 1));
            deltas.push((e.end, -1));
        }
        deltas.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut live = 0i32;
        for (_, d) in deltas {
            live += d;
            assert!(live as usize <= caps.get(class), "{class:?} oversubscribed");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Parallel expansion under random capacities and costs produces the
    /// same bytes as the one-call-at-a-time oracle, visits each stage once,
    /// and never cheats a gate or a slot limit.
    #[test]
    fn parallel_expansion_matches_the_sequential_oracle(
        raw in arb_raw_points(),
        compute in 1usize..5,
        bandwidth in 1usize..5,
        base in 0.5f64..4.0,
        per_tok in 0.002f64..0.05,
        per_out in 0.25f64..2.0,
        max_tokens in 4usize..24,
    ) {
        let dag = dag_from_records(&to_records(&raw));
        let cost = SimCostModel {
            prefill_base: base,
            prefill_per_token: per_tok,
            decode_per_token: per_out,
            search_cost: 5.0,
        };
        let backend: Arc<SimBackend<f64>> = Arc::new(SimBackend::new(cost));
        let caps = Capacities {
            search: 1,
            compute,
            bandwidth,
        };
        let opts = ExpansionOptions {
            max_tokens: Some(max_tokens),
            ..ExpansionOptions::default()
        };

        let par = run_expansion(&dag, backend.clone(), caps, &opts).unwrap();
        let seq = run_sequential_baseline(&dag, backend, &opts).unwrap();

        prop_assert_eq!(&par.answer, &seq.answer);
        prop_assert_eq!(&par.outputs, &seq.outputs);
        prop_assert_eq!(par.timeline.len(), dag.len() * 2, "each stage exactly once");
        check_gating(&dag, &par.timeline);
        check_capacity(&par.timeline, caps);
        prop_assert!(par.makespan <= seq.makespan + 1e-9, "parallelism never slower");
    }
}

// -------------------------------------------------------------- retrieval

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Indexed top-k equals a brute-force cosine scan over every chunk, for
    /// every k, with ties broken by insertion order.
    #[test]
    fn top_k_matches_a_full_scan(
        docs in proptest::collection::vec("[a-z]{2,6}( [a-z]{2,6}){3,30}", 1..8),
        query in "[a-z]{2,6}( [a-z]{2,6}){0,6}",
        k in 1usize..8,
    ) {
        let corpus = Corpus::from_texts(
            docs.iter()
                .enumerate()
                .map(|(i, text)| (format!("doc{i}"), text.clone())),
        );
        let spec = ChunkSpec { chunk_chars: 40, overlap_chars: 8 };
        let embedder = HashEmbedder::new(64, 7).unwrap();
        let retriever: Retriever<f64> = Retriever::build(&corpus, &spec, embedder).unwrap();

        let hits = retriever.top_k(&query, k).unwrap();

        // Full scan over the same chunking.
        let mut all = Vec::new();
        for (doc_id, text) in &corpus.docs {
            for chunk in fanout_core::retrieval::chunk_text(doc_id, text, &spec).unwrap() {
                all.push(chunk);
            }
        }
        let q: fanout_core::retrieval::Embedding<f64> = embedder.embed(&query).unwrap();
        let mut scored: Vec<(usize, f64)> = Vec::new();
        for (i, c) in all.iter().enumerate() {
            let e: fanout_core::retrieval::Embedding<f64> = embedder.embed(&c.text).unwrap();
            if !e.is_zero() {
                scored.push((i, fanout_core::retrieval::cosine(&q, &e)));
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        prop_assert_eq!(hits.len(), k.min(scored.len()));
        for (hit, (idx, score)) in hits.iter().zip(&scored) {
            prop_assert!((hit.1 - score).abs() < 1e-12);
            prop_assert_eq!(&hit.0.text, &all[*idx].text);
        }
    }
}

// --------------------------------------------------------- merge ordering

#[test]
fn merged_answers_list_sections_in_point_order() {
    let points = vec![
        KeyPoint {
            id: 1,
            title: "build".into(),
            instruction: "build the model".into(),
        },
        KeyPoint {
            id: 2,
            title: "solve x".into(),
            instruction: "solve for x".into(),
        },
        KeyPoint {
            id: 3,
            title: "solve y".into(),
            instruction: "solve for y".into(),
        },
        KeyPoint {
            id: 4,
            title: "check".into(),
            instruction: "check the solution".into(),
        },
    ];
    let relations = vec![
        Relation { from: 1, to: 2, kind: EdgeKind::Contextual },
        Relation { from: 1, to: 3, kind: EdgeKind::Contextual },
        Relation { from: 2, to: 4, kind: EdgeKind::Dependent },
        Relation { from: 3, to: 4, kind: EdgeKind::Dependent },
    ];
    let dag = build_point_dag(points, relations).unwrap();
    assert_eq!(
        dag.parents(4).iter().map(|r| r.from).collect::<Vec<_>>(),
        vec![2, 3]
    );

    let backend: Arc<SimBackend<f64>> = Arc::new(SimBackend::new(SimCostModel::default()));
    let run = run_expansion(
        &dag,
        backend,
        Capacities::default(),
        &ExpansionOptions::default(),
    )
    .unwrap();
    let order: Vec<usize> = ["build", "solve x", "solve y", "check"]
        .iter()
        .map(|t| run.answer.find(&format!("## {t}\n")).unwrap())
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]));
}
