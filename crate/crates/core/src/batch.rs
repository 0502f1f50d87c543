//! Batch construction: cluster every segment at once and build the automaton
//! from scratch. Serves as the comparison baseline for local updates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::classifier::fit_classifier;
use crate::cluster::{complete_linkage, distance_matrix};
use crate::config::LearnConfig;
use crate::demos::{segment_by_reference, DemoSegment, Demonstration};
use crate::error::{Error, Result};
use crate::model::{fit_segments_policy, NodeId, Primitive, TaskModel, TraversalRecord};
use crate::par::{self, ExecMode};
use crate::situ::RefitCounters;

/// Segments of one demonstration, preceded either by the start node or by
/// whichever node ends up holding segment `after = (demo_id, position)`.
#[derive(Debug, Clone)]
pub struct SegmentSequence {
    pub demo_id: String,
    pub after: Option<(String, usize)>,
    pub segments: Vec<DemoSegment>,
}

impl SegmentSequence {
    pub fn from_demo(demo: &Demonstration) -> Result<Self> {
        Ok(SegmentSequence {
            demo_id: demo.demo_id.clone(),
            after: None,
            segments: segment_by_reference(demo)?,
        })
    }
}

/// Builds a model from demonstrations that each begin at the task start.
pub fn batch_build(
    layout: Vec<String>,
    demos: &[Demonstration],
    config: &LearnConfig,
    mode: ExecMode,
) -> Result<(TaskModel, RefitCounters)> {
    let sequences = demos.iter().map(SegmentSequence::from_demo).collect::<Result<Vec<_>>>()?;
    build_from_sequences(layout, &sequences, config, mode)
}

pub fn build_from_sequences(
    layout: Vec<String>,
    sequences: &[SegmentSequence],
    config: &LearnConfig,
    mode: ExecMode,
) -> Result<(TaskModel, RefitCounters)> {
    let mut counters = RefitCounters::default();
    let flat: Vec<&DemoSegment> = sequences.iter().flat_map(|s| &s.segments).collect();
    let queries = par::map(mode, &flat, |s| fit_segments_policy(std::slice::from_ref(*s), config))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    counters.query_fits += flat.len();
    let labelled: Vec<(u64, _)> = queries.iter().enumerate().map(|(i, q)| (i as u64, q)).collect();
    let matrix = distance_matrix(&labelled, &config.distance, mode)?;
    counters.distance_evals += flat.len() * flat.len().saturating_sub(1) / 2;
    let clustering = complete_linkage(&matrix, config.tau);

    let mut model = TaskModel::new(layout);
    let mut node_of = vec![NodeId(0); flat.len()];
    for members in &clustering.clusters {
        let id = model.fresh_id();
        for &m in members {
            node_of[m] = id;
        }
    }
    let key_index: HashMap<(&str, usize), usize> = flat
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.demo_id.as_str(), s.position), i))
        .collect();

    let mut flat_index = 0;
    for seq in sequences {
        let first = match &seq.after {
            None => model.start_id,
            Some((demo, pos)) => {
                let i = key_index.get(&(demo.as_str(), *pos)).ok_or_else(|| {
                    Error::invalid(format!("sequence `{}` follows unknown segment {demo}#{pos}", seq.demo_id))
                })?;
                node_of[*i]
            }
        };
        let mut path = vec![first];
        for _ in &seq.segments {
            let v = node_of[flat_index];
            model.edges.insert((*path.last().expect("non-empty"), v));
            path.push(v);
            flat_index += 1;
        }
        if !seq.segments.is_empty() {
            model.traversal_log.push(TraversalRecord {
                demo_id: seq.demo_id.clone(),
                path,
            });
        }
    }

    // Negatives: start states of every sibling under a shared parent.
    let mut positives: BTreeMap<NodeId, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, s) in flat.iter().enumerate() {
        positives.entry(node_of[i]).or_default().push(s.start_state.features.clone());
    }
    let jobs: Vec<(NodeId, Vec<usize>, Vec<Vec<f64>>)> = clustering
        .clusters
        .iter()
        .map(|members| {
            let id = node_of[members[0]];
            let mut siblings = BTreeSet::new();
            for p in model.parents(id) {
                siblings.extend(model.children(p));
            }
            let own: HashSet<Vec<u64>> = positives[&id].iter().map(|f| f.iter().map(|x| x.to_bits()).collect()).collect();
            let negatives = siblings
                .iter()
                .filter(|s| **s != id)
                .flat_map(|s| positives[s].iter())
                .filter(|f| !own.contains(&f.iter().map(|x| x.to_bits()).collect::<Vec<u64>>()))
                .cloned()
                .collect();
            (id, members.clone(), negatives)
        })
        .collect();
    let trained = par::map(mode, &jobs, |(id, members, negatives)| -> Result<Primitive> {
        let segments: Vec<DemoSegment> = members.iter().map(|&m| flat[m].clone()).collect();
        let policy = fit_segments_policy(&segments, config)?;
        let classifier = fit_classifier(&positives[id], negatives, &config.logistic)?;
        Ok(Primitive {
            id: *id,
            policy: Some(policy),
            classifier,
            start_states: segments.iter().map(|s| s.start_state.clone()).collect(),
            stamps: members.iter().map(|&m| m as u64).collect(),
            segments,
        })
    });
    for p in trained {
        model.add_node(p?)?;
        counters.policy_fits += 1;
        counters.classifier_fits += 1;
    }
    model.next_stamp = flat.len() as u64;
    Ok((model, counters))
}

/// The segment a node most recently absorbed, as a `(demo_id, position)` key.
fn latest_segment(model: &TaskModel, id: NodeId) -> Result<Option<(String, usize)>> {
    if id == model.start_id {
        return Ok(None);
    }
    let z = model.node(id)?;
    let (_, seg) = z
        .stamps
        .iter()
        .zip(&z.segments)
        .max_by_key(|(stamp, _)| **stamp)
        .ok_or_else(|| Error::Consistency(format!("node {id} has no provenance")))?;
    Ok(Some((seg.demo_id.clone(), seg.position)))
}

/// Recovers the per-demonstration segment sequences stored in a model.
pub fn sequences_from_model(model: &TaskModel) -> Result<Vec<SegmentSequence>> {
    let mut by_demo: BTreeMap<&str, Vec<&DemoSegment>> = BTreeMap::new();
    for z in model.nodes.values() {
        for s in &z.segments {
            by_demo.entry(s.demo_id.as_str()).or_default().push(s);
        }
    }
    let mut out = Vec::new();
    for rec in &model.traversal_log {
        let Some(segs) = by_demo.get_mut(rec.demo_id.as_str()) else {
            continue;
        };
        segs.sort_by_key(|s| s.position);
        out.push(SegmentSequence {
            demo_id: rec.demo_id.clone(),
            after: latest_segment(model, rec.path[0])?,
            segments: segs.iter().map(|s| (*s).clone()).collect(),
        });
    }
    Ok(out)
}

/// Full rebuild: re-cluster every stored segment together with a corrective
/// demonstration that starts after node `after`, then retrain everything.
pub fn rebuild_with(
    model: &TaskModel,
    after: NodeId,
    corrective: &[DemoSegment],
    config: &LearnConfig,
    mode: ExecMode,
) -> Result<(TaskModel, RefitCounters)> {
    let mut sequences = sequences_from_model(model)?;
    if let Some(first) = corrective.first() {
        sequences.push(SegmentSequence {
            demo_id: first.demo_id.clone(),
            after: latest_segment(model, after)?,
            segments: corrective.to_vec(),
        });
    }
    build_from_sequences(model.layout.clone(), &sequences, config, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::situ::tests::{segment, REACH, SWEEP};

    fn seq(id: &str, shapes: &[&[[f64; 4]; 3]]) -> SegmentSequence {
        SegmentSequence {
            demo_id: id.into(),
            after: None,
            segments: shapes.iter().enumerate().map(|(i, s)| segment(id, i, *s, 0.1 * i as f64)).collect(),
        }
    }

    #[test]
    fn repeated_demos_share_nodes() {
        let seqs = vec![seq("a", &[&REACH, &SWEEP]), seq("b", &[&REACH, &SWEEP])];
        let (m, c) = build_from_sequences(vec!["a".into(), "b".into()], &seqs, &LearnConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(m.kappa(), 3);
        assert_eq!(c.policy_fits, 2);
        assert_eq!(m.edges.len(), 2);
        assert_eq!(m.traversal_log[0].path, m.traversal_log[1].path);
        m.check_consistency().unwrap();
    }

    #[test]
    fn modes_agree() {
        let seqs = vec![seq("a", &[&REACH, &SWEEP]), seq("b", &[&SWEEP])];
        let cfg = LearnConfig::default();
        let (s, _) = build_from_sequences(vec!["a".into(), "b".into()], &seqs, &cfg, ExecMode::Sequential).unwrap();
        let (p, _) = build_from_sequences(vec!["a".into(), "b".into()], &seqs, &cfg, ExecMode::Parallel).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn rebuild_round_trips_sequences() {
        let seqs = vec![seq("a", &[&REACH, &SWEEP])];
        let cfg = LearnConfig::default();
        let (m, _) = build_from_sequences(vec!["a".into(), "b".into()], &seqs, &cfg, ExecMode::Sequential).unwrap();
        let back = sequences_from_model(&m).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].segments, seqs[0].segments);
        let (r, _) = rebuild_with(&m, NodeId(1), &[segment("c", 0, &SWEEP, 0.3)], &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(r.kappa(), 3);
        assert_eq!(r.traversal_log[1].path[0], r.traversal_log[0].path[1]);
        r.check_consistency().unwrap();
    }

    #[test]
    fn unknown_predecessor_rejected() {
        let mut s = seq("a", &[&REACH]);
        s.after = Some(("ghost".into(), 0));
        assert!(build_from_sequences(vec!["a".into(), "b".into()], &[s], &LearnConfig::default(), ExecMode::Sequential).is_err());
    }
}
