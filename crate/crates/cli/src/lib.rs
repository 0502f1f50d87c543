//! Command-line surface and teaching-session server for the task learner.

pub mod args;
pub mod commands;
pub mod server;
