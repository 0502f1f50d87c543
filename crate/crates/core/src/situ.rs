//! State-indexed task updates: fold a segmented demonstration into the
//! automaton one segment at a time, reasoning only over the primitives whose
//! classifiers fire on the segment's start state.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::cluster::{complete_linkage, distance_matrix, pair_distance, ClusteringResult, DistanceMatrix, QUERY_ID};
use crate::config::LearnConfig;
use crate::demos::{segment_by_reference, DemoSegment, Demonstration, WorldState};
use crate::error::{Error, Result};
use crate::hmm::GaussianHmm;
use crate::model::{fit_segments_policy, NodeId, Primitive, TaskModel, TraversalRecord};
use crate::classifier::fit_classifier;
use crate::par::ExecMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    NodeAddition,
    EdgeAddition,
    NodeModification,
}

impl EditKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EditKind::NodeAddition => "node_addition",
            EditKind::EdgeAddition => "edge_addition",
            EditKind::NodeModification => "node_modification",
        }
    }
}

/// One edit applied to the automaton.
///
/// For a node modification produced by merging, `nodes[0]` is the surviving
/// id and the remaining ids were folded into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub kind: EditKind,
    pub nodes: Vec<NodeId>,
    pub edge: Option<(NodeId, NodeId)>,
    pub demo_id: String,
    pub segment: usize,
}

impl EditRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("edit record serializes")
    }
}

/// Writes one JSON record per line.
pub fn edit_log_text(edits: &[EditRecord]) -> String {
    edits.iter().map(|e| e.to_line() + "\n").collect()
}

/// Work performed by an update, for locality accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefitCounters {
    /// Model primitives whose policy was (re)trained.
    pub policy_fits: usize,
    /// Model primitives whose classifier was (re)trained.
    pub classifier_fits: usize,
    /// Throwaway policies trained on a query segment.
    pub query_fits: usize,
    pub distance_evals: usize,
}

impl std::ops::AddAssign for RefitCounters {
    fn add_assign(&mut self, o: Self) {
        self.policy_fits += o.policy_fits;
        self.classifier_fits += o.classifier_fits;
        self.query_fits += o.query_fits;
        self.distance_evals += o.distance_evals;
    }
}

/// Per-segment trace of one local update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub applicable: Vec<NodeId>,
    pub clusters_after: usize,
    pub matched: Option<NodeId>,
    pub node: NodeId,
    pub counters: RefitCounters,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SituOutcome {
    pub edits: Vec<EditRecord>,
    pub steps: Vec<StepReport>,
    pub counters: RefitCounters,
}

impl SituOutcome {
    pub fn kinds(&self) -> BTreeSet<EditKind> {
        self.edits.iter().map(|e| e.kind).collect()
    }

    pub fn extend(&mut self, other: SituOutcome) {
        self.edits.extend(other.edits);
        self.steps.extend(other.steps);
        self.counters += other.counters;
    }
}

/// Result of clustering an applicable set.
#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    /// One primitive per cluster, ascending by id. Singletons are the untouched originals.
    pub primitives: Vec<Primitive>,
    pub result: ClusteringResult,
    /// Old id to surviving id for every input primitive.
    pub mapping: BTreeMap<NodeId, NodeId>,
    ids: Vec<NodeId>,
    distances: DistanceMatrix,
}

impl ClusterOutcome {
    fn merged(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.result.clusters.iter().filter(|c| c.len() > 1)
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Runs updates with fixed learning settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Updater {
    pub config: LearnConfig,
    pub mode: ExecMode,
}

impl Updater {
    pub fn new(config: LearnConfig) -> Self {
        Updater {
            config,
            mode: ExecMode::default(),
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    /// Folds `segments` (with start states `states`) into `model`, starting from node `z`.
    pub fn situ(
        &self,
        model: &mut TaskModel,
        z: NodeId,
        states: &[WorldState],
        segments: &[DemoSegment],
    ) -> Result<SituOutcome> {
        if states.len() != segments.len() {
            return Err(Error::invalid(format!(
                "{} start states for {} segments",
                states.len(),
                segments.len()
            )));
        }
        if !model.contains(z) {
            return Err(Error::invalid(format!("unknown node {z}")));
        }
        let mut outcome = SituOutcome::default();
        if segments.is_empty() {
            return Ok(outcome);
        }
        model.traversal_log.push(TraversalRecord {
            demo_id: segments[0].demo_id.clone(),
            path: vec![z],
        });
        let record = model.traversal_log.len() - 1;
        let mut a = z;
        for (s, d) in states.iter().zip(segments) {
            let applicable = model.applicable_set(s, self.config.theta);
            let step = self.local_update(model, a, s, d, &applicable, &mut outcome.edits)?;
            a = step.node;
            model.traversal_log[record].path.push(a);
            outcome.counters += step.counters;
            outcome.steps.push(step);
        }
        Ok(outcome)
    }

    /// Segments a demonstration and folds it in from node `z`.
    pub fn situ_demo(&self, model: &mut TaskModel, z: NodeId, demo: &Demonstration) -> Result<SituOutcome> {
        let segments = segment_by_reference(demo)?;
        let states: Vec<WorldState> = segments.iter().map(|s| s.start_state.clone()).collect();
        self.situ(model, z, &states, &segments)
    }

    /// Builds a model from scratch by folding each demonstration in from the start node.
    pub fn bootstrap(&self, layout: Vec<String>, demos: &[Demonstration]) -> Result<(TaskModel, SituOutcome)> {
        let mut model = TaskModel::new(layout);
        let mut outcome = SituOutcome::default();
        for demo in demos {
            let start = model.start_id;
            outcome.extend(self.situ_demo(&mut model, start, demo)?);
        }
        Ok((model, outcome))
    }

    /// One local update for segment `d` starting at state `s` after primitive `a`.
    pub fn local_update(
        &self,
        model: &mut TaskModel,
        a: NodeId,
        s: &WorldState,
        d: &DemoSegment,
        applicable: &[NodeId],
        edits: &mut Vec<EditRecord>,
    ) -> Result<StepReport> {
        model.node(a)?;
        for id in applicable {
            if *id == model.start_id {
                return Err(Error::invalid("the start node is never applicable"));
            }
            model.node(*id)?;
        }
        let mut counters = RefitCounters::default();
        let record = |kind, nodes: Vec<NodeId>, edge| EditRecord {
            kind,
            nodes,
            edge,
            demo_id: d.demo_id.clone(),
            segment: d.position,
        };

        let clustered = self.cluster(model, applicable, &mut counters)?;
        for c in clustered.merged() {
            let ids: Vec<NodeId> = c.iter().map(|&i| clustered.ids[i]).collect();
            edits.push(record(EditKind::NodeModification, ids, None));
        }
        let mapping = clustered.mapping.clone();
        let new_ids: Vec<NodeId> = clustered.primitives.iter().map(|p| p.id).collect();
        let clusters_after = new_ids.len();
        let found = self.find_policy_in(d, &clustered, &mut counters)?;
        self.local_reconnect(model, applicable, clustered.primitives, &mapping)?;
        let a = mapping.get(&a).copied().unwrap_or(a);

        let stamp = model.fresh_stamp();
        let positive = s.features.clone();
        let (node, matched) = match found {
            None => {
                let negatives: Vec<Vec<f64>> = model
                    .children(a)
                    .iter()
                    .flat_map(|c| model.nodes[c].start_features().cloned())
                    .filter(|f| *f != positive)
                    .collect();
                let id = model.fresh_id();
                let mut prim = Primitive::train(
                    id,
                    vec![d.clone()],
                    vec![stamp],
                    std::slice::from_ref(&positive),
                    &negatives,
                    &self.config,
                )?;
                prim.start_states = vec![s.clone()];
                counters.policy_fits += 1;
                counters.classifier_fits += 1;
                model.add_node(prim)?;
                edits.push(record(EditKind::NodeAddition, vec![id], None));
                model.add_edge(a, id)?;
                edits.push(record(EditKind::EdgeAddition, vec![a, id], Some((a, id))));
                (id, None)
            }
            Some(i) => {
                let zid = new_ids[i];
                let mut group: BTreeSet<NodeId> = model.children(a).into_iter().collect();
                for r in model.parents(zid) {
                    group.extend(model.children(r));
                }
                let own: HashSet<Vec<u64>> = model.nodes[&zid]
                    .classifier
                    .positives
                    .iter()
                    .map(|p| bits(p))
                    .chain(std::iter::once(bits(&positive)))
                    .collect();
                let negatives: Vec<Vec<f64>> = group
                    .iter()
                    .flat_map(|c| model.nodes[c].start_features().cloned())
                    .filter(|f| !own.contains(&bits(f)))
                    .collect();

                let z = model.nodes.get_mut(&zid).expect("matched node exists");
                z.segments.push(d.clone());
                z.start_states.push(s.clone());
                z.stamps.push(stamp);
                z.policy = Some(fit_segments_policy(&z.segments, &self.config)?);
                z.classifier = z.classifier.update(std::slice::from_ref(&positive), &negatives)?;
                counters.policy_fits += 1;
                counters.classifier_fits += 1;
                edits.push(record(EditKind::NodeModification, vec![zid], None));
                if model.add_edge(a, zid)? {
                    edits.push(record(EditKind::EdgeAddition, vec![a, zid], Some((a, zid))));
                }
                (zid, Some(zid))
            }
        };
        Ok(StepReport {
            applicable: applicable.to_vec(),
            clusters_after,
            matched,
            node,
            counters,
        })
    }

    /// Clusters the policies of `ids` and retrains every merged cluster on its pooled provenance.
    pub fn cluster(&self, model: &TaskModel, ids: &[NodeId], counters: &mut RefitCounters) -> Result<ClusterOutcome> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let policies: Vec<(u64, &GaussianHmm)> = ids
            .iter()
            .map(|id| {
                let p = model.node(*id)?.policy.as_ref().ok_or_else(|| Error::invalid("start node has no policy"))?;
                Ok((id.0, p))
            })
            .collect::<Result<_>>()?;
        let distances = distance_matrix(&policies, &self.config.distance, self.mode)?;
        counters.distance_evals += ids.len() * ids.len().saturating_sub(1) / 2;
        let result = complete_linkage(&distances, self.config.tau);

        let mut primitives = Vec::with_capacity(result.clusters.len());
        let mut mapping = BTreeMap::new();
        for members in &result.clusters {
            let keep = ids[members[0]];
            for &m in members {
                mapping.insert(ids[m], keep);
            }
            if members.len() == 1 {
                primitives.push(model.nodes[&keep].clone());
                continue;
            }
            let mut provenance: Vec<(u64, DemoSegment, WorldState)> = Vec::new();
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for &m in members {
                let z = &model.nodes[&ids[m]];
                for ((stamp, seg), st) in z.stamps.iter().zip(&z.segments).zip(&z.start_states) {
                    provenance.push((*stamp, seg.clone(), st.clone()));
                }
                positives.extend(z.classifier.positives.iter().cloned());
                negatives.extend(z.classifier.negatives.iter().cloned());
            }
            provenance.sort_by_key(|p| p.0);
            let pos_keys: HashSet<Vec<u64>> = positives.iter().map(|p| bits(p)).collect();
            negatives.retain(|n| !pos_keys.contains(&bits(n)));
            let segments: Vec<DemoSegment> = provenance.iter().map(|p| p.1.clone()).collect();
            let policy = fit_segments_policy(&segments, &self.config)?;
            let classifier = fit_classifier(&positives, &negatives, &self.config.logistic)?;
            counters.policy_fits += 1;
            counters.classifier_fits += 1;
            primitives.push(Primitive {
                id: keep,
                policy: Some(policy),
                classifier,
                stamps: provenance.iter().map(|p| p.0).collect(),
                start_states: provenance.iter().map(|p| p.2.clone()).collect(),
                segments,
            });
        }
        primitives.sort_by_key(|p| p.id);
        Ok(ClusterOutcome {
            primitives,
            result,
            mapping,
            ids,
            distances,
        })
    }

    /// Replaces `old` with `new` and rewrites edges and traversal history through `mapping`.
    pub fn local_reconnect(
        &self,
        model: &mut TaskModel,
        old: &[NodeId],
        new: Vec<Primitive>,
        mapping: &BTreeMap<NodeId, NodeId>,
    ) -> Result<()> {
        let old_set: BTreeSet<NodeId> = old.iter().copied().collect();
        let map = |n: NodeId| -> Result<NodeId> {
            if old_set.contains(&n) {
                mapping
                    .get(&n)
                    .copied()
                    .ok_or_else(|| Error::Consistency(format!("node {n} has no home after clustering")))
            } else {
                Ok(n)
            }
        };
        let edges = model
            .edges
            .iter()
            .map(|&(u, v)| Ok((map(u)?, map(v)?)))
            .collect::<Result<BTreeSet<_>>>()?;
        let mut log = model.traversal_log.clone();
        for rec in &mut log {
            for n in &mut rec.path {
                *n = map(*n)?;
            }
        }
        for id in &old_set {
            model.nodes.remove(id);
        }
        for p in new {
            model.nodes.insert(p.id, p);
        }
        if let Some(&(u, v)) = edges.iter().find(|(u, v)| !model.contains(*u) || !model.contains(*v)) {
            return Err(Error::Consistency(format!("edge ({u}, {v}) lost an endpoint")));
        }
        model.edges = edges;
        model.traversal_log = log;
        Ok(())
    }

    fn find_policy_in(&self, d: &DemoSegment, clustered: &ClusterOutcome, counters: &mut RefitCounters) -> Result<Option<usize>> {
        if clustered.primitives.is_empty() {
            return Ok(None);
        }
        let query = fit_segments_policy(std::slice::from_ref(d), &self.config)?;
        counters.query_fits += 1;
        // Distances between untouched singletons are reused from the clustering pass.
        let index_of: BTreeMap<NodeId, usize> = clustered.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let singles: BTreeSet<NodeId> = clustered
            .result
            .clusters
            .iter()
            .filter(|c| c.len() == 1)
            .map(|c| clustered.ids[c[0]])
            .collect();
        let policies: Vec<(u64, &GaussianHmm)> = clustered
            .primitives
            .iter()
            .map(|p| (p.id.0, p.policy.as_ref().expect("non-start primitive")))
            .collect();
        let n = policies.len();
        let mut pairs = Vec::new();
        let mut matrix = DistanceMatrix::zeros(n + 1);
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (clustered.primitives[i].id, clustered.primitives[j].id);
                if singles.contains(&a) && singles.contains(&b) {
                    matrix.set(i, j, clustered.distances.get(index_of[&a], index_of[&b]));
                } else {
                    pairs.push((i, j));
                }
            }
            pairs.push((i, n));
        }
        let all: Vec<(u64, &GaussianHmm)> = policies.iter().copied().chain(std::iter::once((QUERY_ID, &query))).collect();
        let values = crate::par::map(self.mode, &pairs, |&(i, j)| {
            pair_distance(all[i].0, all[i].1, all[j].0, all[j].1, &self.config.distance)
        });
        counters.distance_evals += pairs.len();
        for ((i, j), v) in pairs.into_iter().zip(values) {
            matrix.set(i, j, v?);
        }
        Ok(query_membership(&complete_linkage(&matrix, self.config.tau), n))
    }

    /// Index of the policy whose cluster absorbs a query HMM trained on `d`, if any.
    pub fn find_policy(&self, d: &DemoSegment, policies: &[&GaussianHmm]) -> Result<Option<usize>> {
        if policies.is_empty() {
            return Ok(None);
        }
        let query = fit_segments_policy(std::slice::from_ref(d), &self.config)?;
        let all: Vec<(u64, &GaussianHmm)> = policies
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u64, *p))
            .chain(std::iter::once((QUERY_ID, &query)))
            .collect();
        let matrix = distance_matrix(&all, &self.config.distance, self.mode)?;
        Ok(query_membership(&complete_linkage(&matrix, self.config.tau), policies.len()))
    }
}

fn query_membership(result: &ClusteringResult, query: usize) -> Option<usize> {
    let cluster = &result.clusters[result.cluster_of(query)?];
    cluster.iter().copied().filter(|&i| i != query).min()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::demos::{Keyframe, Pose2};

    fn layout() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    /// Segment of keyframes given relative to object `a` at the origin.
    pub(crate) fn segment(demo: &str, position: usize, rel: &[[f64; 4]], start_x: f64) -> DemoSegment {
        let objects = [Pose2::new(0.0, 0.0, 0.0), Pose2::new(1.0, 1.0, 0.0)];
        let start = WorldState::capture(&layout(), &objects, Pose2::new(start_x, 0.5, 0.0), 0.0);
        let keyframes: Vec<Keyframe> = rel
            .iter()
            .enumerate()
            .map(|(t, r)| {
                let ee = Pose2::new(r[0], r[1], r[2]);
                let world = if t == 0 {
                    start.clone()
                } else {
                    WorldState::capture(&layout(), &objects, ee, r[3])
                };
                Keyframe {
                    ee_pose: ee,
                    gripper: r[3],
                    reference_object: "a".into(),
                    world,
                    timestamp: t as u64,
                }
            })
            .collect();
        DemoSegment {
            start_state: keyframes[0].world.clone(),
            keyframes,
            reference_object: "a".into(),
            demo_id: demo.into(),
            position,
        }
    }

    pub(crate) const REACH: [[f64; 4]; 3] = [[0.4, 0.0, 0.0, 0.0], [0.1, 0.0, 0.0, 0.0], [0.1, 0.0, 0.0, 1.0]];
    pub(crate) const SWEEP: [[f64; 4]; 3] = [[-0.3, 0.3, 1.0, 1.0], [0.3, 0.3, 1.0, 1.0], [0.3, -0.3, 1.0, 0.0]];

    fn run(model: &mut TaskModel, z: NodeId, segs: &[DemoSegment]) -> SituOutcome {
        let states: Vec<WorldState> = segs.iter().map(|s| s.start_state.clone()).collect();
        Updater::default().situ(model, z, &states, segs).unwrap()
    }

    #[test]
    fn empty_segment_list_is_a_no_op() {
        let mut t = TaskModel::new(layout());
        let before = t.clone();
        let out = run(&mut t, NodeId(0), &[]);
        assert!(out.edits.is_empty());
        assert_eq!(t, before);
    }

    #[test]
    fn length_mismatch_and_unknown_node() {
        let mut t = TaskModel::new(layout());
        let seg = segment("d", 0, &REACH, 0.0);
        let u = Updater::default();
        assert!(u.situ(&mut t, NodeId(0), &[], std::slice::from_ref(&seg)).is_err());
        assert!(u.situ(&mut t, NodeId(42), &[seg.start_state.clone()], &[seg]).is_err());
    }

    #[test]
    fn bootstrap_single_segment() {
        let mut t = TaskModel::new(layout());
        let out = run(&mut t, NodeId(0), &[segment("d0", 0, &REACH, 0.0)]);
        let kinds: Vec<EditKind> = out.edits.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EditKind::NodeAddition, EditKind::EdgeAddition]);
        assert_eq!(t.kappa(), 2);
        let z = out.steps[0].node;
        assert!(t.edges.contains(&(NodeId(0), z)));
        // start had no children, so the new classifier saw no negatives
        assert!(t.nodes[&z].classifier.degenerate);
        assert_eq!(t.traversal_log[0].path, vec![NodeId(0), z]);
        t.check_consistency().unwrap();
    }

    #[test]
    fn replay_modifies_without_adding() {
        let mut t = TaskModel::new(layout());
        let seg = segment("d0", 0, &REACH, 0.0);
        run(&mut t, NodeId(0), std::slice::from_ref(&seg));
        let z = NodeId(1);
        let before = t.nodes[&z].policy.clone().unwrap();
        let mut again = seg.clone();
        again.demo_id = "d1".into();
        let out = run(&mut t, NodeId(0), &[again]);
        let kinds: Vec<EditKind> = out.edits.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EditKind::NodeModification]);
        assert_eq!(t.kappa(), 2);
        assert_eq!(t.nodes[&z].segments.len(), 2);
        let after = t.nodes[&z].policy.clone().unwrap();
        let drift = crate::hmm::hmm_distance(&before, &after, &Default::default()).unwrap();
        assert!(drift < 0.05, "{drift}");
    }

    #[test]
    fn chain_from_distinct_segments() {
        let mut t = TaskModel::new(layout());
        let out = run(&mut t, NodeId(0), &[segment("d0", 0, &REACH, 0.0), segment("d0", 1, &SWEEP, 0.1)]);
        assert_eq!(t.kappa(), 3);
        assert_eq!(out.kinds().len(), 2);
        let path = &t.traversal_log[0].path;
        assert_eq!(path.len(), 3);
        t.check_consistency().unwrap();
    }

    #[test]
    fn find_policy_examples() {
        let u = Updater::default();
        let d = segment("q", 0, &REACH, 0.0);
        assert_eq!(u.find_policy(&d, &[]).unwrap(), None);
        let own = fit_segments_policy(std::slice::from_ref(&d), &u.config).unwrap();
        assert_eq!(u.find_policy(&d, &[&own]).unwrap(), Some(0));
        let other = fit_segments_policy(&[segment("o", 0, &SWEEP, 0.0)], &u.config).unwrap();
        assert_eq!(u.find_policy(&d, &[&other]).unwrap(), None);
        assert_eq!(u.find_policy(&d, &[&other, &own]).unwrap(), Some(1));
    }

    fn stub(id: u64, mean: f64) -> Primitive {
        crate::model::tests::stub(id, crate::classifier::InitiationClassifier::always(7)).with_mean(mean)
    }

    impl Primitive {
        fn with_mean(mut self, m: f64) -> Self {
            self.policy.as_mut().unwrap().means[0][0] = m;
            self
        }
    }

    #[test]
    fn reconnect_identity_leaves_model_unchanged() {
        let mut t = TaskModel::new(layout());
        for i in 1..=3 {
            t.add_node(stub(i, i as f64)).unwrap();
        }
        t.add_edge(NodeId(0), NodeId(1)).unwrap();
        t.add_edge(NodeId(1), NodeId(2)).unwrap();
        let before = t.clone();
        let ids = [NodeId(1), NodeId(2)];
        let mapping = ids.iter().map(|i| (*i, *i)).collect();
        let new = ids.iter().map(|i| t.nodes[i].clone()).collect();
        Updater::default().local_reconnect(&mut t, &ids, new, &mapping).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn reconnect_merges_middle_pair() {
        // p -> u, v -> q ; merge u and v
        let mut t = TaskModel::new(layout());
        let (p, u, v, q) = (NodeId(1), NodeId(2), NodeId(3), NodeId(4));
        for id in [p, u, v, q] {
            t.add_node(stub(id.0, 0.0)).unwrap();
        }
        t.add_edge(NodeId(0), p).unwrap();
        t.add_edge(p, u).unwrap();
        t.add_edge(u, v).unwrap();
        t.add_edge(v, q).unwrap();
        t.traversal_log.push(TraversalRecord {
            demo_id: "d".into(),
            path: vec![NodeId(0), u, v, q],
        });
        let mapping: BTreeMap<NodeId, NodeId> = [(u, u), (v, u)].into_iter().collect();
        let merged = t.nodes[&u].clone();
        Updater::default().local_reconnect(&mut t, &[u, v], vec![merged], &mapping).unwrap();
        assert!(!t.contains(v));
        assert!(t.edges.contains(&(p, u)));
        assert!(t.edges.contains(&(u, q)));
        assert!(t.edges.contains(&(u, u)));
        assert!(!t.edges.iter().any(|&(a, b)| a == v || b == v));
        assert_eq!(t.traversal_log[0].path, vec![NodeId(0), u, u, q]);
    }

    #[test]
    fn reconnect_with_mapping_gap_fails() {
        let mut t = TaskModel::new(layout());
        t.add_node(stub(1, 0.0)).unwrap();
        t.add_edge(NodeId(0), NodeId(1)).unwrap();
        let err = Updater::default()
            .local_reconnect(&mut t, &[NodeId(1)], vec![], &BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn cluster_examples() {
        let u = Updater::default();
        let mut t = TaskModel::new(layout());
        let mut c = RefitCounters::default();
        assert!(u.cluster(&t, &[], &mut c).unwrap().primitives.is_empty());

        t.add_node(stub(1, 0.0)).unwrap();
        let out = u.cluster(&t, &[NodeId(1)], &mut c).unwrap();
        assert_eq!(out.primitives, vec![t.nodes[&NodeId(1)].clone()]);
        assert_eq!(c.policy_fits, 0);
    }
}
