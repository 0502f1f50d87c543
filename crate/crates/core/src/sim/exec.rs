use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scenario::{Scenario, SegmentTemplate};
use super::world::{Fault, SimEvent, World};
use crate::demos::{DemoKind, Demonstration, Keyframe, Pose2, WorldState};
use crate::error::{Error, Result};
use crate::hmm::mix_seed;
use crate::model::{NodeId, Selection, TaskModel};
use crate::par::{self, ExecMode};
use crate::situ::{SituOutcome, Updater};

/// Primitive executions allowed before a rollout is cut off.
pub const MAX_VISITS: usize = 64;
/// Per-axis jitter of free objects in rollout worlds.
pub const WORLD_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePlan {
    pub node: NodeId,
    pub probability: f64,
    pub anchor: String,
    /// Sampled keyframes in the anchor's frame.
    pub relative: Vec<[f64; 4]>,
    /// The same keyframes as workspace `[x, y, theta, gripper]` targets.
    pub targets: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum FailureReason {
    /// The model has nothing to execute.
    Untaught,
    Selection { best: f64 },
    Fault { fault: Fault },
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure {
        #[serde(flatten)]
        reason: FailureReason,
        node: NodeId,
        state: WorldState,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExecEvent {
    NodeEntered {
        node: NodeId,
        probability: f64,
    },
    KeyframeReached {
        node: NodeId,
        index: usize,
        pose: Pose2,
        gripper: f64,
        effects: Vec<SimEvent>,
    },
    Failure {
        node: NodeId,
        #[serde(flatten)]
        reason: FailureReason,
        state: WorldState,
    },
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub seed: u64,
    pub visited: Vec<NodeId>,
    pub plans: Vec<NodePlan>,
    /// `worlds[i]` is the world after executing `visited[i]`; `worlds[0]` is the initial world.
    pub worlds: Vec<World>,
    pub events: Vec<ExecEvent>,
    pub outcome: Outcome,
}

impl ExecutionTrace {
    pub fn final_world(&self) -> &World {
        self.worlds.last().expect("trace holds the initial world")
    }

    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }
}

fn to_workspace(anchor: &Pose2, rel: &[f64]) -> [f64; 4] {
    let p = anchor.compose(&Pose2::new(rel[0], rel[1], rel[2]));
    [p.x, p.y, p.theta, rel[3]]
}

/// Runs `model` from `world` until a terminal node, a selection failure or a fault.
pub fn execute(model: &TaskModel, world: World, theta: f64, seed: u64) -> Result<ExecutionTrace> {
    let mut trace = ExecutionTrace {
        seed,
        visited: vec![model.start_id],
        plans: Vec::new(),
        worlds: vec![world.clone()],
        events: Vec::new(),
        outcome: Outcome::Success,
    };
    let mut world = world;
    let mut current = model.start_id;
    let fail = |trace: &mut ExecutionTrace, node: NodeId, reason: FailureReason, state: WorldState| {
        trace.events.push(ExecEvent::Failure {
            node,
            reason: reason.clone(),
            state: state.clone(),
        });
        trace.outcome = Outcome::Failure { reason, node, state };
    };
    loop {
        let state = world.capture();
        if trace.plans.len() >= MAX_VISITS {
            fail(&mut trace, current, FailureReason::StepLimit, state);
            break;
        }
        let (next, probability) = match model.select_next(current, &state, theta)? {
            Selection::Terminal if current == model.start_id => {
                fail(&mut trace, current, FailureReason::Untaught, state);
                break;
            }
            Selection::Terminal => {
                trace.events.push(ExecEvent::Finished);
                break;
            }
            Selection::Failure { best } => {
                fail(&mut trace, current, FailureReason::Selection { best }, state);
                break;
            }
            Selection::Next(z, p) => (z, p),
        };
        trace.events.push(ExecEvent::NodeEntered { node: next, probability });
        let node = model.node(next)?;
        let policy = node.policy.as_ref().ok_or_else(|| Error::Consistency("start node selected as child".into()))?;
        let anchor = node
            .anchor_object()
            .ok_or_else(|| Error::Consistency(format!("node {next} has no provenance")))?
            .to_string();
        let anchor_pose = world
            .pose(&anchor)
            .ok_or_else(|| Error::invalid(format!("world has no object `{anchor}`")))?;
        let sampled = policy.sample_keyframes(mix_seed(seed, trace.plans.len() as u64));
        let plan = NodePlan {
            node: next,
            probability,
            relative: sampled.iter().map(|k| [k[0], k[1], k[2], k[3]]).collect(),
            targets: sampled.iter().map(|k| to_workspace(&anchor_pose, k)).collect(),
            anchor,
        };
        let mut fault = None;
        for (index, t) in plan.targets.iter().enumerate() {
            match world.step_to(Pose2::new(t[0], t[1], t[2]), t[3]) {
                Ok(effects) => trace.events.push(ExecEvent::KeyframeReached {
                    node: next,
                    index,
                    pose: world.ee,
                    gripper: world.gripper,
                    effects,
                }),
                Err(f) => {
                    fault = Some(f);
                    break;
                }
            }
        }
        trace.plans.push(plan);
        trace.visited.push(next);
        trace.worlds.push(world.clone());
        current = next;
        if let Some(fault) = fault {
            fail(&mut trace, next, FailureReason::Fault { fault }, world.capture());
            break;
        }
    }
    Ok(trace)
}

/// Plays scripted segments from `world`, perturbing each keyframe (σ on
/// position, σ/2 on angle) and recording the scene before every motion.
pub fn perform(
    world: &mut World,
    segments: &[SegmentTemplate],
    sigma: f64,
    seed: u64,
    demo_id: &str,
    kind: DemoKind,
) -> Result<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let ang = Normal::new(0.0, sigma.max(0.0) / 2.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut keyframes = Vec::new();
    for seg in segments {
        for k in &seg.keyframes {
            let reference = world
                .pose(&seg.reference)
                .ok_or_else(|| Error::invalid(format!("world has no object `{}`", seg.reference)))?;
            let rel = if sigma > 0.0 {
                [k[0] + pos.sample(&mut rng), k[1] + pos.sample(&mut rng), k[2] + ang.sample(&mut rng), k[3]]
            } else {
                *k
            };
            let t = to_workspace(&reference, &rel);
            let target = Pose2::new(t[0], t[1], t[2]);
            let before = world.capture();
            world
                .step_to(target, t[3])
                .map_err(|f| Error::invalid(format!("demonstration `{demo_id}` faulted: {f}")))?;
            keyframes.push(Keyframe {
                ee_pose: target,
                gripper: world.gripper,
                reference_object: seg.reference.clone(),
                world: before,
                timestamp: keyframes.len() as u64,
            });
        }
    }
    Ok(Demonstration {
        demo_id: demo_id.to_string(),
        kind,
        keyframes,
    })
}

/// A full demonstration of `variant` from its noiseless initial world.
pub fn generate_demo(scenario: &Scenario, variant: &str, sigma: f64, seed: u64) -> Result<Demonstration> {
    let mut world = scenario.initial_world(variant, 0.0, 0)?;
    let v = scenario.variant(variant)?;
    let id = format!("{}-{}-{}", scenario.name, variant, seed);
    perform(&mut world, &v.script, sigma, seed, &id, DemoKind::Full)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub trace: ExecutionTrace,
    pub goal_met: bool,
}

impl RunResult {
    pub fn success(&self) -> bool {
        self.goal_met && self.trace.completed()
    }
}

/// Executes `model` in a seeded, jittered initial world of `variant` and checks the goal.
pub fn run_with_model(model: &TaskModel, scenario: &Scenario, variant: &str, theta: f64, seed: u64) -> Result<RunResult> {
    let world = scenario.initial_world(variant, WORLD_NOISE, seed)?;
    let trace = execute(model, world, theta, seed)?;
    let goal_met = scenario.goal_met(trace.final_world());
    Ok(RunResult { trace, goal_met })
}

/// Fraction of seeds whose rollout reaches a terminal node with the goal met.
pub fn success_rate(
    model: &TaskModel,
    scenario: &Scenario,
    variant: &str,
    theta: f64,
    seeds: &[u64],
    mode: ExecMode,
) -> Result<f64> {
    if seeds.is_empty() {
        return Ok(0.0);
    }
    let results = par::map(mode, seeds, |&s| run_with_model(model, scenario, variant, theta, s).map(|r| r.success()));
    let mut ok = 0usize;
    for r in results {
        ok += r? as usize;
    }
    Ok(ok as f64 / seeds.len() as f64)
}

/// Bootstraps a model from `count` noisy demonstrations of `variant`.
pub fn teach(
    updater: &Updater,
    scenario: &Scenario,
    variant: &str,
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<(TaskModel, SituOutcome)> {
    let demos = (0..count)
        .map(|i| generate_demo(scenario, variant, sigma, mix_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    updater.bootstrap(scenario.layout(), &demos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub before: RunResult,
    pub failure_node: NodeId,
    pub demo: Demonstration,
    pub outcome: SituOutcome,
}

/// Runs the model on `variant` and demonstrates the variant's corrective tail
/// from the world reached after the still-valid prefix. Returns the rollout,
/// the node the correction attaches to, and the corrective demonstration.
pub fn corrective_demo(
    model: &TaskModel,
    scenario: &Scenario,
    variant: &str,
    theta: f64,
    sigma: f64,
    seed: u64,
) -> Result<(RunResult, NodeId, Demonstration)> {
    let v = scenario.variant(variant)?;
    let before = run_with_model(model, scenario, variant, theta, seed)?;
    let k = v.attach_after;
    if before.trace.visited.len() <= k {
        return Err(Error::invalid(format!(
            "execution stopped after {} primitives, before the correction point {k}",
            before.trace.visited.len() - 1
        )));
    }
    let failure_node = before.trace.visited[k];
    let mut world = before.trace.worlds[k].clone();
    let id = format!("{}-{}-fix-{}", scenario.name, variant, seed);
    let demo = perform(&mut world, &v.script[k..], sigma, mix_seed(seed, 0xC0), &id, DemoKind::Corrective)?;
    Ok((before, failure_node, demo))
}

/// [`corrective_demo`] followed by the update.
pub fn scripted_correction(
    updater: &Updater,
    model: &mut TaskModel,
    scenario: &Scenario,
    variant: &str,
    sigma: f64,
    seed: u64,
) -> Result<Correction> {
    let (before, failure_node, demo) = corrective_demo(model, scenario, variant, updater.config.theta, sigma, seed)?;
    let outcome = updater.situ_demo(model, failure_node, &demo)?;
    Ok(Correction {
        before,
        failure_node,
        demo,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LearnConfig;

    #[test]
    fn empty_model_is_untaught() {
        let s = Scenario::builtin("pour").unwrap();
        let m = TaskModel::new(s.layout());
        let r = run_with_model(&m, &s, "base", 0.5, 1).unwrap();
        assert!(matches!(r.trace.outcome, Outcome::Failure { reason: FailureReason::Untaught, .. }));
        assert!(!r.success());
    }

    #[test]
    fn taught_base_runs_deterministically() {
        let s = Scenario::builtin("pour").unwrap();
        let u = Updater::new(LearnConfig::default());
        let (m, _) = teach(&u, &s, "base", 1, 0.005, 3).unwrap();
        let a = run_with_model(&m, &s, "base", 0.5, 9).unwrap();
        assert!(a.success(), "{:?}", a.trace.outcome);
        assert_eq!(a, run_with_model(&m, &s, "base", 0.5, 9).unwrap());
        assert_eq!(a.trace.worlds.len(), a.trace.visited.len());
        assert_eq!(a.trace.events.last(), Some(&ExecEvent::Finished));
        let seeds = [1, 2, 3, 4];
        let seq = success_rate(&m, &s, "base", 0.5, &seeds, ExecMode::Sequential).unwrap();
        assert_eq!(seq, success_rate(&m, &s, "base", 0.5, &seeds, ExecMode::Parallel).unwrap());
    }

    #[test]
    fn demo_noise_is_seeded() {
        let s = Scenario::builtin("scoop").unwrap();
        let a = generate_demo(&s, "base", 0.005, 4).unwrap();
        assert_eq!(a, generate_demo(&s, "base", 0.005, 4).unwrap());
        assert_ne!(a.keyframes, generate_demo(&s, "base", 0.005, 5).unwrap().keyframes);
        let clean = generate_demo(&s, "base", 0.0, 4).unwrap();
        assert_eq!(clean.keyframes.len(), a.keyframes.len());
    }
}
