//! Incremental task-automaton learning from keyframe demonstrations.
//!
//! A task is a finite-state automaton whose nodes pair a keyframe HMM policy
//! with a logistic initiation classifier. Corrective demonstrations are folded
//! in segment by segment, touching only the primitives whose classifiers fire
//! on the segment's start state.

pub mod batch;
pub mod bench;
pub mod classifier;
pub mod cluster;
pub mod config;
pub mod demos;
pub mod error;
pub mod hmm;
pub mod model;
pub mod par;
pub mod sim;
pub mod situ;

pub use error::{Error, Result};
