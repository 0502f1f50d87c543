//! Synthetic models for timing one corrective update against a full rebuild.
//!
//! The start node has `kappa` children. Child `i` is taught by segments that
//! trace its own small shape around a grid cell and begin in a scene where
//! marker `i` has been pushed out of line, so every classifier watches a
//! different feature and the applicable set of a new segment stays small.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{build_from_sequences, rebuild_with, SegmentSequence};
use crate::config::LearnConfig;
use crate::demos::{DemoSegment, Keyframe, Pose2, WorldState};
use crate::error::{Error, Result};
use crate::hmm::mix_seed;
use crate::model::{NodeId, TaskModel};
use crate::par::ExecMode;
use crate::situ::{RefitCounters, Updater};

pub const BENCH_SCHEMA_VERSION: u32 = 1;
const REFERENCE: &str = "origin";
const MARKER_SHIFT: f64 = 6.0;
const GRID: f64 = 0.3;

pub fn synthetic_layout(kappa: usize) -> Vec<String> {
    std::iter::once(REFERENCE.to_string())
        .chain((0..kappa).map(|i| format!("marker{i:03}")))
        .collect()
}

fn scene(kappa: usize, active: usize) -> Vec<Pose2> {
    std::iter::once(Pose2::origin())
        .chain((0..kappa).map(|i| {
            let shift = if i == active { MARKER_SHIFT } else { 0.0 };
            Pose2::new(i as f64 * 0.1, 2.0 + shift, 0.0)
        }))
        .collect()
}

/// Keyframes of child `i`, relative to the reference at the origin.
pub fn synthetic_template(i: usize) -> Vec<[f64; 4]> {
    let cx = (i % 10) as f64 * GRID - 1.35;
    let cy = (i / 10) as f64 * GRID - 0.75;
    vec![
        [cx, cy + 0.125, 0.0, 0.0],
        [cx, cy, 0.0, 0.0],
        [cx, cy, 0.0, 1.0],
        [cx + 0.075, cy, 0.0, 1.0],
        [cx + 0.075, cy, 0.0, 1.0],
    ]
}

/// A noisy segment of child `i` that starts in the scene where marker `i` is displaced.
pub fn synthetic_segment(kappa: usize, i: usize, demo_id: &str, sigma: f64, seed: u64) -> Result<DemoSegment> {
    let layout = synthetic_layout(kappa);
    let objects = scene(kappa, i);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let start = WorldState::capture(&layout, &objects, Pose2::new(0.0, -1.0, 0.0), 0.0);
    let mut prev = start.clone();
    let mut keyframes = Vec::new();
    for (t, k) in synthetic_template(i).iter().enumerate() {
        let ee = Pose2::new(k[0] + noise.sample(&mut rng), k[1] + noise.sample(&mut rng), k[2]);
        keyframes.push(Keyframe {
            ee_pose: ee,
            gripper: k[3],
            reference_object: REFERENCE.into(),
            world: prev,
            timestamp: t as u64,
        });
        prev = WorldState::capture(&layout, &objects, ee, k[3]);
    }
    Ok(DemoSegment {
        keyframes,
        reference_object: REFERENCE.into(),
        start_state: start,
        demo_id: demo_id.into(),
        position: 0,
    })
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub model: TaskModel,
    /// Corrective segment for child `target`, demonstrated from the start node.
    pub corrective: DemoSegment,
    pub target: NodeId,
}

/// Flat model with `kappa` children, each taught by `per_node` noisy segments.
pub fn synthetic_model(
    kappa: usize,
    per_node: usize,
    sigma: f64,
    seed: u64,
    config: &LearnConfig,
    mode: ExecMode,
) -> Result<Synthetic> {
    if kappa < 2 || per_node == 0 {
        return Err(Error::invalid("synthetic models need at least two children and one segment each"));
    }
    let mut sequences = Vec::new();
    for d in 0..per_node {
        for i in 0..kappa {
            let id = format!("syn-{d}-{i}");
            let s = synthetic_segment(kappa, i, &id, sigma, mix_seed(seed, (d * kappa + i) as u64))?;
            sequences.push(SegmentSequence {
                demo_id: id,
                after: None,
                segments: vec![s],
            });
        }
    }
    let (model, _) = build_from_sequences(synthetic_layout(kappa), &sequences, config, mode)?;
    let j = kappa / 2;
    let owner = format!("syn-0-{j}");
    let target = model
        .nodes
        .values()
        .find(|z| z.segments.iter().any(|s| s.demo_id == owner))
        .map(|z| z.id)
        .ok_or_else(|| Error::Consistency("synthetic target node missing".into()))?;
    let corrective = synthetic_segment(kappa, j, "syn-fix", sigma, mix_seed(seed, u64::MAX))?;
    Ok(Synthetic {
        model,
        corrective,
        target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kappa: usize,
    /// Size of the applicable set the local update reasoned over.
    pub applicable: usize,
    pub situ_seconds: f64,
    pub rebuild_seconds: f64,
    pub ratio: f64,
    pub situ: RefitCounters,
    pub rebuild: RefitCounters,
}

impl BenchRow {
    pub fn situ_refits(&self) -> usize {
        self.situ.policy_fits.max(self.situ.classifier_fits)
    }

    pub fn rebuild_refits(&self) -> usize {
        self.rebuild.policy_fits.max(self.rebuild.classifier_fits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub mode: String,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>4} {:>12} {:>12} {:>7} {:>11} {:>14}\n",
            "kappa", "|Z|", "situ_ms", "rebuild_ms", "ratio", "situ_refit", "rebuild_refit"
        );
        for r in &self.rows {
            s += &format!(
                "{:>6} {:>4} {:>12.3} {:>12.3} {:>7.4} {:>11} {:>14}\n",
                r.kappa,
                r.applicable,
                r.situ_seconds * 1e3,
                r.rebuild_seconds * 1e3,
                r.ratio,
                r.situ_refits(),
                r.rebuild_refits()
            );
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Times the local update and the rebuild for one synthetic model, taking
/// the median of `repeats` runs of each.
pub fn bench_row(kappa: usize, config: &LearnConfig, mode: ExecMode, repeats: usize, seed: u64) -> Result<BenchRow> {
    let syn = synthetic_model(kappa, 2, 0.005, seed, config, mode)?;
    let updater = Updater { config: *config, mode };
    let start = syn.model.start_id;
    let states = [syn.corrective.start_state.clone()];
    let segs = std::slice::from_ref(&syn.corrective);
    let mut situ_times = Vec::new();
    let mut rebuild_times = Vec::new();
    let mut situ = None;
    let mut rebuild = None;
    for _ in 0..repeats.max(1) {
        let mut m = syn.model.clone();
        let t = Instant::now();
        let out = updater.situ(&mut m, start, &states, segs)?;
        situ_times.push(t.elapsed().as_secs_f64());
        situ = Some(out);

        let t = Instant::now();
        let (_, counters) = rebuild_with(&syn.model, start, segs, config, mode)?;
        rebuild_times.push(t.elapsed().as_secs_f64());
        rebuild = Some(counters);
    }
    let situ = situ.expect("at least one repeat");
    let situ_seconds = median(situ_times);
    let rebuild_seconds = median(rebuild_times);
    Ok(BenchRow {
        kappa,
        applicable: situ.steps[0].applicable.len(),
        situ_seconds,
        rebuild_seconds,
        ratio: situ_seconds / rebuild_seconds,
        situ: situ.counters,
        rebuild: rebuild.expect("at least one repeat"),
    })
}

pub fn bench(sizes: &[usize], config: &LearnConfig, mode: ExecMode, repeats: usize, seed: u64, config_hash: String) -> Result<BenchReport> {
    let rows = sizes
        .iter()
        .map(|&k| bench_row(k, config, mode, repeats, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        config_hash,
        mode: format!("{mode:?}").to_lowercase(),
        repeats,
        rows,
    })
}
