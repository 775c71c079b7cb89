//! Typed-dependency point graphs and their executable stage form.
//!
//! A reasoning answer is decomposed into key points. Each point may relate to
//! an earlier point in one of three ways:
//!
//! * [`EdgeKind::Null`] — no logical connection; no edge is materialized.
//! * [`EdgeKind::Contextual`] — the child only needs the parent's *statement*
//!   to be phrased well, so it can start as soon as the parent's prompt
//!   ingestion (prefill) is done.
//! * [`EdgeKind::Dependent`] — the child consumes the parent's *output*, so
//!   it must wait for the parent to finish generating (decode).
//!
//! [`PointDag`] is the validated point-level view. [`StageGraph`] rewrites
//! each point into an explicit `Prefill`/`Decode` pair, which is the graph
//! the scheduler actually runs: contextual edges gate the child's prefill on
//! the parent's prefill, dependent edges gate it on the parent's decode.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Identifier of a key point, as assigned by the decomposition step.
pub type PointId = u32;

/// How a point relates to one of its predecessors.
///
/// The wire tag for `Null` is `"none"`; it exists so models can state
/// independence explicitly, and it never becomes an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    #[serde(rename = "none")]
    Null,
    /// Child reads the parent's point statement; prefill-to-prefill gate.
    Contextual,
    /// Child reads the parent's generated output; decode-to-prefill gate.
    Dependent,
}

/// A materialized dependency: point `to` relates to earlier point `from`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub from: PointId,
    pub to: PointId,
    pub kind: EdgeKind,
}

/// One key point of the decomposed answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPoint {
    pub id: PointId,
    /// Short heading used for answer assembly and report labels.
    pub title: String,
    /// The point content to expand.
    pub instruction: String,
}

#[derive(Debug, Error)]
pub enum DagError {
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("duplicate point id {0}")]
    DuplicatePointId(PointId),
    #[error("relation {from}->{to} ({kind:?}) references an unknown point")]
    UnknownPointReference {
        from: PointId,
        to: PointId,
        kind: EdgeKind,
    },
    #[error("point {0} depends on itself")]
    SelfLoop(PointId),
    #[error("dependency cycle among points {0:?}")]
    CycleDetected(Vec<PointId>),
}

/// Validated point-level dependency graph.
///
/// Construction drops `Null` relations, deduplicates repeated declarations
/// and rejects unknown references, self-loops and cycles. All accessors
/// iterate in ascending id order so downstream behaviour is deterministic.
#[derive(Debug, Clone)]
pub struct PointDag {
    points: BTreeMap<PointId, KeyPoint>,
    /// Materialized relations per child, sorted by (from, kind).
    parents: BTreeMap<PointId, Vec<Relation>>,
    children: BTreeMap<PointId, Vec<Relation>>,
}

/// Builds the validated DAG from points and their declared relations.
pub fn build_point_dag(
    points: Vec<KeyPoint>,
    relations: Vec<Relation>,
) -> Result<PointDag, DagError> {
    if points.is_empty() {
        return Err(DagError::EmptyPointSet);
    }
    let mut by_id = BTreeMap::new();
    for p in points {
        let id = p.id;
        if by_id.insert(id, p).is_some() {
            return Err(DagError::DuplicatePointId(id));
        }
    }

    let mut parents: BTreeMap<PointId, Vec<Relation>> =
        by_id.keys().map(|&id| (id, Vec::new())).collect();
    let mut children: BTreeMap<PointId, Vec<Relation>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in relations {
        if r.kind == EdgeKind::Null {
            continue;
        }
        if r.from == r.to {
            return Err(DagError::SelfLoop(r.from));
        }
        if !by_id.contains_key(&r.from) || !by_id.contains_key(&r.to) {
            return Err(DagError::UnknownPointReference {
                from: r.from,
                to: r.to,
                kind: r.kind,
            });
        }
        if !seen.insert((r.from, r.to, r.kind)) {
            continue;
        }
        parents.get_mut(&r.to).expect("known point").push(r);
        children.entry(r.from).or_default().push(r);
    }
    for v in parents.values_mut() {
        v.sort_by_key(|r| (r.from, r.kind));
    }
    for v in children.values_mut() {
        v.sort_by_key(|r| (r.to, r.kind));
    }

    let dag = PointDag {
        points: by_id,
        parents,
        children,
    };
    dag.check_acyclic()?;
    Ok(dag)
}

impl PointDag {
    fn check_acyclic(&self) -> Result<(), DagError> {
        let mut indeg: BTreeMap<PointId, usize> =
            self.parents.iter().map(|(&id, ps)| (id, ps.len())).collect();
        let mut queue: Vec<PointId> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut seen = 0usize;
        while let Some(id) = queue.pop() {
            seen += 1;
            for r in self.children.get(&id).map_or(&[][..], |v| v) {
                let d = indeg.get_mut(&r.to).expect("child is a known point");
                *d -= 1;
                if *d == 0 {
                    queue.push(r.to);
                }
            }
        }
        if seen < self.points.len() {
            let stuck: Vec<PointId> = indeg
                .iter()
                .filter(|(_, &d)| d > 0)
                .map(|(&id, _)| id)
                .collect();
            return Err(DagError::CycleDetected(stuck));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = PointId> + '_ {
        self.points.keys().copied()
    }

    pub fn point(&self, id: PointId) -> Option<&KeyPoint> {
        self.points.get(&id)
    }

    pub fn points(&self) -> impl Iterator<Item = &KeyPoint> {
        self.points.values()
    }

    /// Materialized relations into `id`, sorted by (parent id, kind).
    pub fn parents(&self, id: PointId) -> &[Relation] {
        self.parents.get(&id).map_or(&[], |v| v)
    }

    /// All materialized relations, sorted.
    pub fn edges(&self) -> Vec<Relation> {
        let mut out: Vec<Relation> = self.parents.values().flatten().copied().collect();
        out.sort();
        out
    }

    /// Points outside `completed` whose parents are all in `completed`.
    pub fn ready_points(&self, completed: &BTreeSet<PointId>) -> Vec<PointId> {
        self.points
            .keys()
            .filter(|id| !completed.contains(id))
            .filter(|id| self.parents(**id).iter().all(|r| completed.contains(&r.from)))
            .copied()
            .collect()
    }

    pub fn roots(&self) -> Vec<PointId> {
        self.ready_points(&BTreeSet::new())
    }

    /// Longest-path layering at point granularity.
    pub fn wavefronts(&self) -> Vec<Vec<PointId>> {
        let mut layer: BTreeMap<PointId, usize> = BTreeMap::new();
        let mut changed = true;
        while changed {
            changed = false;
            for (&id, rels) in &self.parents {
                let want = rels
                    .iter()
                    .map(|r| layer.get(&r.from).map_or(0, |l| l + 1))
                    .max()
                    .unwrap_or(0);
                if layer.get(&id) != Some(&want) {
                    layer.insert(id, want);
                    changed = true;
                }
            }
        }
        collect_layers(layer)
    }
}

/// Rewrites each point into a `Prefill`/`Decode` pair.
///
/// Exactly three edge rules apply: `Prefill(i)→Decode(i)` for every point,
/// `Prefill(k)→Prefill(j)` per contextual relation, `Decode(k)→Prefill(j)`
/// per dependent relation. No other stage edges exist; in particular no
/// transitive reduction is attempted (it would never change ready sets).
pub fn expand_to_stage_graph(dag: &PointDag) -> StageGraph {
    let mut preds: BTreeMap<StageNode, Vec<StageNode>> = BTreeMap::new();
    let mut succs: BTreeMap<StageNode, Vec<StageNode>> = BTreeMap::new();
    let mut links = Vec::new();
    for id in dag.ids() {
        for n in [StageNode::prefill(id), StageNode::decode(id)] {
            preds.entry(n).or_default();
            succs.entry(n).or_default();
        }
        links.push((StageNode::prefill(id), StageNode::decode(id)));
    }
    for r in dag.edges() {
        let gate = match r.kind {
            EdgeKind::Contextual => StageNode::prefill(r.from),
            EdgeKind::Dependent => StageNode::decode(r.from),
            EdgeKind::Null => unreachable!("null relations are never materialized"),
        };
        links.push((gate, StageNode::prefill(r.to)));
    }
    for (from, to) in links {
        succs.get_mut(&from).expect("node registered").push(to);
        preds.get_mut(&to).expect("node registered").push(from);
    }
    for v in preds.values_mut() {
        v.sort();
        v.dedup();
    }
    for v in succs.values_mut() {
        v.sort();
        v.dedup();
    }
    let nodes = preds.keys().copied().collect();
    StageGraph { nodes, preds, succs }
}

/// Execution phase of a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// Prompt ingestion; compute-bound.
    Prefill,
    /// Token generation; memory-bandwidth-bound.
    Decode,
}

/// One schedulable unit: a phase of a point.
///
/// Ordering is (point id, phase) with `Prefill` before `Decode`, which is
/// also the scheduler's tie-break order. The unit's resource class is a pure
/// function of the phase; see [`Phase`] and the scheduler's class mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageNode {
    pub point: PointId,
    pub phase: Phase,
}

impl StageNode {
    pub fn prefill(point: PointId) -> Self {
        StageNode {
            point,
            phase: Phase::Prefill,
        }
    }

    pub fn decode(point: PointId) -> Self {
        StageNode {
            point,
            phase: Phase::Decode,
        }
    }
}

impl fmt::Display for StageNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let phase = match self.phase {
            Phase::Prefill => "Pre",
            Phase::Decode => "Dec",
        };
        write!(f, "{phase}:{}", self.point)
    }
}

/// Stage-level dependency graph; what the scheduler dispatches.
#[derive(Debug, Clone)]
pub struct StageGraph {
    nodes: Vec<StageNode>,
    preds: BTreeMap<StageNode, Vec<StageNode>>,
    succs: BTreeMap<StageNode, Vec<StageNode>>,
}

impl StageGraph {
    /// All stage nodes, sorted by (point id, phase).
    pub fn nodes(&self) -> &[StageNode] {
        &self.nodes
    }

    pub fn predecessors(&self, n: StageNode) -> &[StageNode] {
        self.preds.get(&n).map_or(&[], |v| v)
    }

    pub fn successors(&self, n: StageNode) -> &[StageNode] {
        self.succs.get(&n).map_or(&[], |v| v)
    }

    pub fn edges(&self) -> Vec<(StageNode, StageNode)> {
        let mut out = Vec::new();
        for (&from, tos) in &self.succs {
            for &to in tos {
                out.push((from, to));
            }
        }
        out.sort();
        out
    }
}

/// Non-completed stages whose predecessors are all in `completed`.
///
/// With `completed = ∅` this is the zero-in-degree start set; re-evaluating
/// it as stages finish walks the whole graph in dependency order.
pub fn ready_set(graph: &StageGraph, completed: &BTreeSet<StageNode>) -> Vec<StageNode> {
    graph
        .nodes
        .iter()
        .filter(|n| !completed.contains(n))
        .filter(|n| graph.predecessors(**n).iter().all(|p| completed.contains(p)))
        .copied()
        .collect()
}

/// Longest-path layering: each wavefront is a maximal set of mutually
/// unordered stages at one depth, and their concatenation is a topological
/// order.
pub fn topological_wavefronts(graph: &StageGraph) -> Vec<Vec<StageNode>> {
    let mut layer: BTreeMap<StageNode, usize> = BTreeMap::new();
    let mut changed = true;
    while changed {
        changed = false;
        for &n in &graph.nodes {
            let want = graph
                .predecessors(n)
                .iter()
                .map(|p| layer.get(p).map_or(0, |l| l + 1))
                .max()
                .unwrap_or(0);
            if layer.get(&n) != Some(&want) {
                layer.insert(n, want);
                changed = true;
            }
        }
    }
    collect_layers(layer)
}

fn collect_layers<K: Ord + Copy>(layer: BTreeMap<K, usize>) -> Vec<Vec<K>> {
    let mut out: Vec<Vec<K>> = Vec::new();
    for (k, l) in layer {
        if out.len() <= l {
            out.resize_with(l + 1, Vec::new);
        }
        out[l].push(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn point(id: PointId) -> KeyPoint {
        KeyPoint {
            id,
            title: format!("point {id}"),
            instruction: format!("expand point {id}"),
        }
    }

    fn rel(from: PointId, to: PointId, kind: EdgeKind) -> Relation {
        Relation { from, to, kind }
    }

    /// Two chains: 1 →(ctx) 2 and 3 →(dep) 4, with 1 and 3 independent.
    fn two_chain_dag() -> PointDag {
        build_point_dag(
            (1..=4).map(point).collect(),
            vec![
                rel(1, 2, EdgeKind::Contextual),
                rel(3, 4, EdgeKind::Dependent),
            ],
        )
        .unwrap()
    }

    /// Diamond: 2 and 3 contextual on 1, 4 dependent on both 2 and 3.
    fn diamond_dag() -> PointDag {
        build_point_dag(
            (1..=4).map(point).collect(),
            vec![
                rel(1, 2, EdgeKind::Contextual),
                rel(1, 3, EdgeKind::Contextual),
                rel(2, 4, EdgeKind::Dependent),
                rel(3, 4, EdgeKind::Dependent),
            ],
        )
        .unwrap()
    }

    #[test]
    fn diamond_parents_and_edges() {
        let dag = diamond_dag();
        let p4: Vec<PointId> = dag.parents(4).iter().map(|r| r.from).collect();
        assert_eq!(p4, vec![2, 3]);
        assert_eq!(dag.edges().len(), 4);
        assert_eq!(dag.roots(), vec![1]);
    }

    #[test]
    fn stage_graph_of_two_chains() {
        let sg = expand_to_stage_graph(&two_chain_dag());
        let pre = StageNode::prefill;
        let dec = StageNode::decode;
        assert_eq!(
            sg.edges(),
            vec![
                (pre(1), dec(1)),
                (pre(1), pre(2)),
                (pre(2), dec(2)),
                (pre(3), dec(3)),
                (dec(3), pre(4)),
                (pre(4), dec(4)),
            ]
        );
        assert_eq!(
            topological_wavefronts(&sg),
            vec![
                vec![pre(1), pre(3)],
                vec![dec(1), pre(2), dec(3)],
                vec![dec(2), pre(4)],
                vec![dec(4)],
            ]
        );
    }

    #[test]
    fn dependent_chain_has_no_prefill_shortcut() {
        let dag = build_point_dag(
            vec![point(1), point(2)],
            vec![rel(1, 2, EdgeKind::Dependent)],
        )
        .unwrap();
        let sg = expand_to_stage_graph(&dag);
        let edges = sg.edges();
        assert!(edges.contains(&(StageNode::decode(1), StageNode::prefill(2))));
        assert!(!edges.contains(&(StageNode::prefill(1), StageNode::prefill(2))));
        assert_eq!(topological_wavefronts(&sg).len(), 4, "chain of 4 stages");
    }

    #[test]
    fn single_point_stage_graph() {
        let dag = build_point_dag(vec![point(1)], vec![]).unwrap();
        let sg = expand_to_stage_graph(&dag);
        assert_eq!(
            sg.edges(),
            vec![(StageNode::prefill(1), StageNode::decode(1))]
        );
    }

    #[test]
    fn ready_points_walk_the_diamond() {
        let dag = diamond_dag();
        let c = |ids: &[PointId]| ids.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(dag.ready_points(&c(&[])), vec![1]);
        assert_eq!(dag.ready_points(&c(&[1])), vec![2, 3]);
        assert_eq!(dag.ready_points(&c(&[1, 2])), vec![3]);
        assert_eq!(dag.ready_points(&c(&[1, 3])), vec![2]);
        assert_eq!(dag.ready_points(&c(&[1, 2, 3])), vec![4]);
        assert_eq!(dag.ready_points(&c(&[1, 2, 3, 4])), Vec::<PointId>::new());
    }

    #[test]
    fn stage_ready_respects_gate_kinds() {
        let sg = expand_to_stage_graph(&two_chain_dag());
        let pre = StageNode::prefill;
        let dec = StageNode::decode;
        let mut fin = BTreeSet::new();
        assert_eq!(ready_set(&sg, &fin), vec![pre(1), pre(3)]);
        fin.insert(pre(1));
        // Contextual child 2 unlocks off the parent's prefill alone.
        assert_eq!(ready_set(&sg, &fin), vec![dec(1), pre(2), pre(3)]);
        fin.insert(pre(3));
        // Dependent child 4 still waits: decode(3) hasn't run.
        assert_eq!(ready_set(&sg, &fin), vec![dec(1), pre(2), dec(3)]);
        fin.insert(dec(3));
        assert_eq!(ready_set(&sg, &fin), vec![dec(1), pre(2), pre(4)]);
    }

    #[test]
    fn null_relations_leave_no_edges() {
        let dag = build_point_dag(
            vec![point(1), point(2)],
            vec![rel(1, 2, EdgeKind::Null)],
        )
        .unwrap();
        assert!(dag.edges().is_empty());
        assert_eq!(dag.roots(), vec![1, 2]);
    }

    #[test]
    fn both_kinds_from_one_parent_gate_on_decode() {
        let dag = build_point_dag(
            vec![point(1), point(2)],
            vec![
                rel(1, 2, EdgeKind::Contextual),
                rel(1, 2, EdgeKind::Dependent),
            ],
        )
        .unwrap();
        assert_eq!(dag.parents(2).len(), 2, "both stage gates kept");
        let sg = expand_to_stage_graph(&dag);
        let preds = sg.predecessors(StageNode::prefill(2));
        assert!(preds.contains(&StageNode::prefill(1)));
        assert!(preds.contains(&StageNode::decode(1)));
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            build_point_dag(vec![], vec![]),
            Err(DagError::EmptyPointSet)
        ));
        assert!(matches!(
            build_point_dag(vec![point(1), point(1)], vec![]),
            Err(DagError::DuplicatePointId(1))
        ));
        assert!(matches!(
            build_point_dag(vec![point(1)], vec![rel(7, 1, EdgeKind::Contextual)]),
            Err(DagError::UnknownPointReference { from: 7, to: 1, .. })
        ));
        assert!(matches!(
            build_point_dag(vec![point(1)], vec![rel(1, 1, EdgeKind::Dependent)]),
            Err(DagError::SelfLoop(1))
        ));
        let cyc = build_point_dag(
            vec![point(1), point(2)],
            vec![
                rel(1, 2, EdgeKind::Dependent),
                rel(2, 1, EdgeKind::Contextual),
            ],
        );
        match cyc {
            Err(DagError::CycleDetected(ids)) => assert_eq!(ids, vec![1, 2]),
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn kind_wire_tags() {
        assert_eq!(serde_json::to_string(&EdgeKind::Null).unwrap(), "\"none\"");
        assert_eq!(
            serde_json::to_string(&EdgeKind::Contextual).unwrap(),
            "\"contextual\""
        );
        assert_eq!(
            serde_json::from_str::<EdgeKind>("\"dependent\"").unwrap(),
            EdgeKind::Dependent
        );
    }
}
