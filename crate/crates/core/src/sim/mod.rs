//! Deterministic 2D tabletop: objects, a point end effector with a gripper,
//! a rule table for task effects, scripted scenarios and model execution.

pub mod exec;
pub mod scenario;
pub mod world;

pub use exec::{
    corrective_demo, execute, generate_demo, perform, run_with_model, scripted_correction, success_rate, teach, Correction, ExecEvent,
    ExecutionTrace, FailureReason, NodePlan, Outcome, RunResult, MAX_VISITS, WORLD_NOISE,
};
pub use scenario::{GoalCheck, Scenario, SegmentTemplate, Variant, BASE_VARIANT};
pub use world::{Fault, Flag, Flags, SimEvent, World};
