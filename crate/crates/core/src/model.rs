//! The task automaton: primitives, transitions, provenance, and persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{fit_classifier, InitiationClassifier};
use crate::config::LearnConfig;
use crate::demos::{check_version, DemoSegment, WorldState};
use crate::error::{Error, Result};
use crate::hmm::{fit_policy, state_count_for, GaussianHmm};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "z{}", self.0)
    }
}

/// One node of the automaton: a policy plus the classifier saying where it may begin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: NodeId,
    /// `None` only for the virtual start node.
    pub policy: Option<GaussianHmm>,
    pub classifier: InitiationClassifier,
    pub segments: Vec<DemoSegment>,
    /// Start state of each stored segment, aligned with `segments`.
    pub start_states: Vec<WorldState>,
    /// Ingestion order of each stored segment, aligned with `segments`.
    pub stamps: Vec<u64>,
}

/// Trains a policy on the interpolated trajectories of `segments`.
pub fn fit_segments_policy(segments: &[DemoSegment], config: &LearnConfig) -> Result<GaussianHmm> {
    let trajectories = segments
        .iter()
        .map(|s| s.trajectory(config.interp_step))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = segments.iter().map(|s| s.keyframes.len()).collect();
    let (hmm, _) = fit_policy(&trajectories, Some(state_count_for(&counts)), &config.em)?;
    Ok(hmm)
}

impl Primitive {
    /// Builds and trains a primitive from its provenance.
    pub fn train(
        id: NodeId,
        segments: Vec<DemoSegment>,
        stamps: Vec<u64>,
        positives: &[Vec<f64>],
        negatives: &[Vec<f64>],
        config: &LearnConfig,
    ) -> Result<Self> {
        let policy = fit_segments_policy(&segments, config)?;
        let classifier = fit_classifier(positives, negatives, &config.logistic)?;
        let start_states = segments.iter().map(|s| s.start_state.clone()).collect();
        Ok(Primitive {
            id,
            policy: Some(policy),
            classifier,
            segments,
            start_states,
            stamps,
        })
    }

    pub fn is_start(&self) -> bool {
        self.policy.is_none()
    }

    /// Reference object of the most recently ingested segment.
    pub fn anchor_object(&self) -> Option<&str> {
        self.stamps
            .iter()
            .zip(&self.segments)
            .max_by_key(|(stamp, _)| **stamp)
            .map(|(_, s)| s.reference_object.as_str())
    }

    pub fn start_features(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.start_states.iter().map(|s| &s.features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalRecord {
    pub demo_id: String,
    pub path: Vec<NodeId>,
}

/// Outcome of choosing the next primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Next(NodeId, f64),
    Terminal,
    /// Every child scored below the threshold; carries the best score seen.
    Failure { best: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub layout: Vec<String>,
    pub nodes: BTreeMap<NodeId, Primitive>,
    pub edges: BTreeSet<(NodeId, NodeId)>,
    pub start_id: NodeId,
    pub traversal_log: Vec<TraversalRecord>,
    pub next_id: u64,
    pub next_stamp: u64,
}

impl TaskModel {
    /// A model holding only the virtual start node.
    pub fn new(layout: Vec<String>) -> Self {
        let dim = layout.len() * 3 + 1;
        let start = Primitive {
            id: NodeId(0),
            policy: None,
            classifier: InitiationClassifier::always(dim),
            segments: Vec::new(),
            start_states: Vec::new(),
            stamps: Vec::new(),
        };
        let mut nodes = BTreeMap::new();
        nodes.insert(NodeId(0), start);
        TaskModel {
            layout,
            nodes,
            edges: BTreeSet::new(),
            start_id: NodeId(0),
            traversal_log: Vec::new(),
            next_id: 1,
            next_stamp: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.layout.len() * 3 + 1
    }

    /// Node count including the start node.
    pub fn kappa(&self) -> usize {
        self.nodes.len()
    }

    pub fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn fresh_stamp(&mut self) -> u64 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    pub fn node(&self, id: NodeId) -> Result<&Primitive> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("unknown node {id}")))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn add_node(&mut self, z: Primitive) -> Result<NodeId> {
        let id = z.id;
        if self.nodes.contains_key(&id) {
            return Err(Error::invalid(format!("node {id} already exists")));
        }
        self.next_id = self.next_id.max(id.0 + 1);
        if let Some(&m) = z.stamps.iter().max() {
            self.next_stamp = self.next_stamp.max(m + 1);
        }
        self.nodes.insert(id, z);
        Ok(id)
    }

    /// Inserts `u -> v`; returns whether the edge was new.
    pub fn add_edge(&mut self, u: NodeId, v: NodeId) -> Result<bool> {
        if !self.contains(u) || !self.contains(v) {
            return Err(Error::invalid(format!("edge ({u}, {v}) has a missing endpoint")));
        }
        Ok(self.edges.insert((u, v)))
    }

    pub fn children(&self, u: NodeId) -> Vec<NodeId> {
        self.edges
            .range((u, NodeId(0))..=(u, NodeId(u64::MAX)))
            .map(|&(_, v)| v)
            .collect()
    }

    pub fn parents(&self, v: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|e| e.1 == v).map(|e| e.0).collect()
    }

    /// Non-start primitives whose classifiers fire on `s`, ascending by id.
    pub fn applicable_set(&self, s: &WorldState, theta: f64) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|z| !z.is_start() && z.classifier.is_activated(s, theta))
            .map(|z| z.id)
            .collect()
    }

    /// Picks the child of `current` with the highest classifier confidence.
    pub fn select_next(&self, current: NodeId, s: &WorldState, theta: f64) -> Result<Selection> {
        self.node(current)?;
        let children = self.children(current);
        if children.is_empty() {
            return Ok(Selection::Terminal);
        }
        let mut best: Option<(NodeId, f64)> = None;
        for c in children {
            let p = self.nodes[&c].classifier.predict_proba(s)?;
            // strict comparison keeps the lowest id on ties
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((c, p));
            }
        }
        let (id, p) = best.unwrap();
        Ok(if p >= theta {
            Selection::Next(id, p)
        } else {
            Selection::Failure { best: p }
        })
    }

    /// Removes a node and every incident edge.
    pub fn remove_node(&mut self, id: NodeId) -> Option<Primitive> {
        self.edges.retain(|&(u, v)| u != id && v != id);
        self.nodes.remove(&id)
    }

    /// Retrains every non-start primitive from its stored provenance.
    pub fn retrain_from_provenance(&self, config: &LearnConfig) -> Result<TaskModel> {
        let mut out = self.clone();
        for z in out.nodes.values_mut() {
            if z.is_start() {
                continue;
            }
            z.policy = Some(fit_segments_policy(&z.segments, config)?);
            z.classifier = fit_classifier(&z.classifier.positives, &z.classifier.negatives, &config.logistic)?;
        }
        Ok(out)
    }

    /// Structural invariants: endpoints resolve, provenance is aligned, logged paths follow edges.
    pub fn check_consistency(&self) -> Result<()> {
        let start = self.node(self.start_id)?;
        if !start.is_start() || !start.classifier.degenerate {
            return Err(Error::Consistency("start node must be policy-free and always active".into()));
        }
        for (id, z) in &self.nodes {
            if *id != z.id {
                return Err(Error::Consistency(format!("node key {id} holds {}", z.id)));
            }
            if z.is_start() != (*id == self.start_id) {
                return Err(Error::Consistency(format!("node {id} lacks a policy")));
            }
            if z.segments.len() != z.start_states.len() || z.segments.len() != z.stamps.len() {
                return Err(Error::Consistency(format!("node {id} provenance misaligned")));
            }
            if let Some(p) = &z.policy {
                p.validate()?;
            }
        }
        for &(u, v) in &self.edges {
            if !self.contains(u) || !self.contains(v) {
                return Err(Error::Consistency(format!("edge ({u}, {v}) dangles")));
            }
        }
        for rec in &self.traversal_log {
            for w in rec.path.windows(2) {
                if !self.edges.contains(&(w[0], w[1])) {
                    return Err(Error::Consistency(format!(
                        "traversal of `{}` uses missing edge ({}, {})",
                        rec.demo_id, w[0], w[1]
                    )));
                }
            }
            if let Some(n) = rec.path.iter().find(|n| !self.contains(**n)) {
                return Err(Error::Consistency(format!("traversal visits unknown node {n}")));
            }
        }
        Ok(())
    }

    pub fn segment_count(&self) -> usize {
        self.nodes.values().map(|z| z.segments.len()).sum()
    }

    /// Graphviz rendering; ordering follows node and edge ids.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph task {\n  rankdir=LR;\n");
        for z in self.nodes.values() {
            if z.is_start() {
                let _ = writeln!(out, "  {} [label=\"start\", shape=doublecircle, style=filled, fillcolor=lightgrey];", z.id);
            } else {
                let _ = writeln!(
                    out,
                    "  {} [label=\"{}\\nref={}\\nsegments={}\", shape=box];",
                    z.id,
                    z.id,
                    z.anchor_object().unwrap_or("-"),
                    z.segments.len()
                );
            }
        }
        for (u, v) in &self.edges {
            let _ = writeln!(out, "  {u} -> {v};");
        }
        out.push_str("}\n");
        out
    }

    pub fn to_text(&self) -> String {
        let file = ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            layout: self.layout.clone(),
            start_id: self.start_id,
            next_id: self.next_id,
            next_stamp: self.next_stamp,
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.iter().copied().collect(),
            traversal_log: self.traversal_log.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serializes");
        text.push('\n');
        text
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("model file", e))?;
        check_version(&value, MODEL_SCHEMA_VERSION)?;
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::parse("model file", e))?;
        let mut nodes = BTreeMap::new();
        for z in file.nodes {
            if nodes.insert(z.id, z).is_some() {
                return Err(Error::invalid("model file repeats a node id"));
            }
        }
        let model = TaskModel {
            layout: file.layout,
            nodes,
            edges: file.edges.into_iter().collect(),
            start_id: file.start_id,
            traversal_log: file.traversal_log,
            next_id: file.next_id,
            next_stamp: file.next_stamp,
        };
        model.check_consistency()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    layout: Vec<String>,
    start_id: NodeId,
    next_id: u64,
    next_stamp: u64,
    nodes: Vec<Primitive>,
    edges: Vec<(NodeId, NodeId)>,
    traversal_log: Vec<TraversalRecord>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::classifier::LogisticConfig;

    pub(crate) fn state(features: Vec<f64>) -> WorldState {
        WorldState {
            layout: vec!["o".into()],
            features,
            ee: crate::demos::Pose2::origin(),
        }
    }

    pub(crate) fn stub(id: u64, classifier: InitiationClassifier) -> Primitive {
        Primitive {
            id: NodeId(id),
            policy: Some(GaussianHmm {
                initial: vec![1.0],
                transitions: vec![vec![1.0]],
                means: vec![vec![id as f64, 0.0, 0.0, 0.0]],
                variances: vec![vec![1e-2; 4]],
            }),
            classifier,
            segments: vec![],
            start_states: vec![],
            stamps: vec![],
        }
    }

    fn model() -> TaskModel {
        TaskModel::new(vec!["o".into()])
    }

    #[test]
    fn add_node_examples() {
        let mut t = model();
        let a = t.add_node(stub(1, InitiationClassifier::always(4))).unwrap();
        assert_eq!(t.kappa(), 2);
        let b = t.add_node(stub(2, InitiationClassifier::always(4))).unwrap();
        assert_ne!(a, b);
        assert!(t.edges.is_empty());
        assert!(t.add_node(stub(1, InitiationClassifier::always(4))).is_err());
        assert_eq!(t.node(a).unwrap(), &stub(1, InitiationClassifier::always(4)));
    }

    #[test]
    fn add_edge_examples() {
        let mut t = model();
        let a = t.add_node(stub(1, InitiationClassifier::always(4))).unwrap();
        let z = t.add_node(stub(2, InitiationClassifier::always(4))).unwrap();
        assert!(t.add_edge(a, z).unwrap());
        assert!(!t.add_edge(a, z).unwrap());
        assert_eq!(t.edges.len(), 1);
        assert_eq!(t.children(a), vec![z]);
        assert_eq!(t.parents(z), vec![a]);
        assert!(t.add_edge(a, a).unwrap());
        assert_eq!(t.edges.iter().filter(|e| **e == (a, a)).count(), 1);
        assert!(t.add_edge(a, NodeId(99)).is_err());
    }

    #[test]
    fn applicable_set_examples() {
        let mut t = model();
        assert!(t.applicable_set(&state(vec![0.0; 4]), 0.5).is_empty());
        t.add_node(stub(1, InitiationClassifier::always(4))).unwrap();
        assert_eq!(t.applicable_set(&state(vec![9.0; 4]), 0.5), vec![NodeId(1)]);
    }

    #[test]
    fn applicable_set_separable_clusters() {
        // cluster A around x = +2, cluster B around x = -2 (first feature)
        let pts = |c: f64| -> Vec<Vec<f64>> {
            (0..10).map(|i| vec![c + 0.05 * i as f64, 0.1 * (i % 3) as f64, 0.0, 0.0]).collect()
        };
        let cfg = LogisticConfig::default();
        let mut t = model();
        t.add_node(stub(1, fit_classifier(&pts(2.0), &pts(-2.0), &cfg).unwrap())).unwrap();
        t.add_node(stub(2, fit_classifier(&pts(-2.0), &pts(2.0), &cfg).unwrap())).unwrap();
        assert_eq!(t.applicable_set(&state(vec![2.2, 0.1, 0.0, 0.0]), 0.5), vec![NodeId(1)]);
        assert_eq!(t.applicable_set(&state(vec![-2.1, 0.0, 0.0, 0.0]), 0.5), vec![NodeId(2)]);
    }

    fn fixed(bias: f64) -> InitiationClassifier {
        InitiationClassifier {
            weights: vec![0.0; 4],
            bias,
            positives: vec![],
            negatives: vec![],
            degenerate: false,
            config: LogisticConfig::default(),
        }
    }

    #[test]
    fn select_next_examples() {
        let mut t = model();
        let s = state(vec![0.0; 4]);
        assert_eq!(t.select_next(t.start_id, &s, 0.5).unwrap(), Selection::Terminal);

        t.add_node(stub(1, InitiationClassifier::always(4))).unwrap();
        t.add_edge(NodeId(0), NodeId(1)).unwrap();
        assert_eq!(t.select_next(NodeId(0), &s, 0.5).unwrap(), Selection::Next(NodeId(1), 1.0));

        // children with confidences 0.9 and 0.2
        let logit = |p: f64| (p / (1.0 - p)).ln();
        t.add_node(stub(2, fixed(logit(0.2)))).unwrap();
        t.add_node(stub(3, fixed(logit(0.9)))).unwrap();
        t.add_edge(NodeId(1), NodeId(2)).unwrap();
        t.add_edge(NodeId(1), NodeId(3)).unwrap();
        match t.select_next(NodeId(1), &s, 0.5).unwrap() {
            Selection::Next(id, p) => {
                assert_eq!(id, NodeId(3));
                assert!((p - 0.9).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            t.select_next(NodeId(1), &s, 1.0 - 1e-12).unwrap(),
            Selection::Failure { .. }
        ));
    }

    #[test]
    fn ties_prefer_lowest_id() {
        let mut t = model();
        t.add_node(stub(5, fixed(1.0))).unwrap();
        t.add_node(stub(4, fixed(1.0))).unwrap();
        t.add_edge(NodeId(0), NodeId(5)).unwrap();
        t.add_edge(NodeId(0), NodeId(4)).unwrap();
        let s = state(vec![0.0; 4]);
        assert!(matches!(t.select_next(NodeId(0), &s, 0.5).unwrap(), Selection::Next(NodeId(4), _)));
    }

    #[test]
    fn dot_examples() {
        let mut t = model();
        assert_eq!(t.to_dot().lines().filter(|l| l.contains("->")).count(), 0);
        for i in 1..=3 {
            t.add_node(stub(i, InitiationClassifier::always(4))).unwrap();
        }
        t.add_edge(NodeId(1), NodeId(2)).unwrap();
        t.add_edge(NodeId(2), NodeId(3)).unwrap();
        let dot = t.to_dot();
        assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 2);
        assert!(dot.contains("doublecircle"));
        assert_eq!(dot, t.clone().to_dot());
    }

    #[test]
    fn empty_model_round_trip() {
        let t = model();
        let back = TaskModel::from_text(&t.to_text()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut t = model();
        t.add_node(stub(1, InitiationClassifier::always(4))).unwrap();
        let text = t.to_text();
        let err = TaskModel::from_text(&text[..text.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Parse { line, .. } if line > 0), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = model().to_text().replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(TaskModel::from_text(&text), Err(Error::Version { found: 7, .. })));
    }
}
