use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use situ_core::config::RunConfig;
use situ_core::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "situ", version, about = "Teach, correct and run keyframe task automata in a 2D tabletop simulator")]
pub struct Cli {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every command. Flags override values from `--config`.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Builtin scenario name or scenario file.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// Scenario variant: base, lid_on, stained_bowl or bowl_moved.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Classifier activation threshold.
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    /// Clustering cut height.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Demonstration noise on position.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// First seed; rollouts use consecutive seeds from here.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of seeded rollouts.
    #[arg(long, global = true)]
    pub rollouts: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_text(&std::fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.scenario {
            cfg.scenario = s.clone();
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.clone();
        }
        if let Some(t) = self.theta {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidInput(format!("--theta must lie in [0, 1], got {t}")));
            }
            cfg.learn.theta = t;
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::InvalidInput(format!("--tau must be positive, got {t}")));
            }
            cfg.learn.tau = t;
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) {
                return Err(Error::InvalidInput(format!("--sigma must be non-negative, got {s}")));
            }
            cfg.sigma = s;
        }
        if self.seed.is_some() || self.rollouts.is_some() {
            let first = self.seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
            let n = self.rollouts.unwrap_or(cfg.seeds.len().max(1)) as u64;
            cfg.seeds = (first..first + n).collect();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scripted demonstration file for a scenario variant.
    Demo {
        #[arg(long)]
        out: PathBuf,
        /// Run this model first and demonstrate only the corrective tail from where it went wrong.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build a model from scratch by folding in each demonstration.
    Build {
        #[arg(long)]
        out: PathBuf,
        /// Write edit records here, one JSON object per line.
        #[arg(long)]
        log: Option<PathBuf>,
        demos: Vec<PathBuf>,
    },
    /// Fold a corrective demonstration into a model after its failure node.
    Correct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        failure_node: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Execute a model on seeded rollouts and report the success rate.
    Exec {
        #[arg(long)]
        model: PathBuf,
        /// Write the first rollout's trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Time one local update against a full rebuild on synthetic models.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "10,25,50")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Disable data parallelism.
        #[arg(long)]
        sequential: bool,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a model as a Graphviz digraph.
    ExportDot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a scenario definition file.
    Scenario {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the effective run configuration.
    Config {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Host the teaching-session protocol over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}
