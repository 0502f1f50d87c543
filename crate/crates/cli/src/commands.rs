use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use situ_core::bench::bench;
use situ_core::config::RunConfig;
use situ_core::demos::{DemoFile, Demonstration};
use situ_core::error::Error;
use situ_core::model::{NodeId, TaskModel};
use situ_core::par::{self, ExecMode};
use situ_core::sim::{corrective_demo, generate_demo, run_with_model, Outcome, Scenario};
use situ_core::situ::{edit_log_text, EditRecord, SituOutcome, Updater};

use crate::args::{Cli, Command};

/// 3 for broken internal invariants, 2 for anything the caller can fix.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Consistency(_)) => 3,
        _ => 2,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn load_model(path: &Path) -> Result<TaskModel> {
    TaskModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_demo(path: &Path) -> Result<Demonstration> {
    let file = DemoFile::load(path).with_context(|| format!("loading demonstration {}", path.display()))?;
    // An empty corrective demonstration is a valid no-op.
    if !file.demonstration.keyframes.is_empty() {
        file.demonstration.validate()?;
    }
    Ok(file.demonstration)
}

fn check_layout(model_layout: &[String], demo: &Demonstration) -> Result<()> {
    if let Some(kf) = demo.keyframes.first() {
        if kf.world.layout != model_layout {
            return Err(Error::InvalidInput(format!(
                "demonstration `{}` was recorded with objects {:?}, the model expects {:?}",
                demo.demo_id, kf.world.layout, model_layout
            ))
            .into());
        }
    }
    Ok(())
}

fn summary(cfg_hash: &str, model: &TaskModel, outcome: &SituOutcome) -> serde_json::Value {
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &outcome.edits {
        *kinds.entry(e.kind.as_str()).or_default() += 1;
    }
    json!({
        "config_hash": cfg_hash,
        "kappa": model.kappa(),
        "edges": model.edges.len(),
        "edit_kinds": kinds,
        "refit_counts": outcome.counters,
    })
}

fn write_log(path: Option<&Path>, edits: &[EditRecord]) -> Result<()> {
    if let Some(p) = path {
        write(p, &edit_log_text(edits))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.run.resolve()?;
    let hash = cfg.hash();
    eprintln!("situ: config {hash}");
    let updater = Updater::new(cfg.learn);
    let first_seed = cfg.seeds.first().copied().unwrap_or(0);
    match cli.command {
        Command::Demo { out, model } => {
            let scenario = Scenario::resolve(&cfg.scenario)?;
            let report = match model {
                None => {
                    let demo = generate_demo(&scenario, &cfg.variant, cfg.sigma, first_seed)?;
                    DemoFile::new(&scenario.name, demo).save(&out)?;
                    json!({ "config_hash": hash, "demo": out })
                }
                Some(path) => {
                    let model = load_model(&path)?;
                    let (before, node, demo) =
                        corrective_demo(&model, &scenario, &cfg.variant, cfg.learn.theta, cfg.sigma, first_seed)?;
                    DemoFile::new(&scenario.name, demo).save(&out)?;
                    json!({
                        "config_hash": hash,
                        "demo": out,
                        "failure_node": node,
                        "model_succeeded": before.success(),
                    })
                }
            };
            print_json(&report);
        }
        Command::Build { out, log, demos } => {
            let scenario = Scenario::resolve(&cfg.scenario)?;
            let layout = scenario.layout();
            let demos = demos.iter().map(|p| load_demo(p)).collect::<Result<Vec<_>>>()?;
            for d in &demos {
                check_layout(&layout, d)?;
            }
            let (model, outcome) = updater.bootstrap(layout, &demos)?;
            model.check_consistency()?;
            model.save(&out)?;
            write_log(log.as_deref(), &outcome.edits)?;
            print_json(&summary(&hash, &model, &outcome));
        }
        Command::Correct {
            model,
            demo,
            failure_node,
            out,
            log,
        } => {
            let mut m = load_model(&model)?;
            let demo = load_demo(&demo)?;
            check_layout(&m.layout, &demo)?;
            let outcome = if demo.keyframes.is_empty() {
                SituOutcome::default()
            } else {
                updater.situ_demo(&mut m, NodeId(failure_node), &demo)?
            };
            m.check_consistency()?;
            m.save(&out)?;
            write_log(log.as_deref(), &outcome.edits)?;
            print_json(&summary(&hash, &m, &outcome));
        }
        Command::Exec { model, trace } => {
            let scenario = Scenario::resolve(&cfg.scenario)?;
            let m = load_model(&model)?;
            let runs = par::map(ExecMode::Parallel, &cfg.seeds, |&s| {
                run_with_model(&m, &scenario, &cfg.variant, cfg.learn.theta, s)
            })
            .into_iter()
            .collect::<situ_core::error::Result<Vec<_>>>()?;
            if let (Some(p), Some(r)) = (trace, runs.first()) {
                write(&p, &r.trace.to_text())?;
            }
            let failures: Vec<_> = cfg
                .seeds
                .iter()
                .zip(&runs)
                .filter(|(_, r)| !r.success())
                .map(|(s, r)| {
                    let reason = match &r.trace.outcome {
                        Outcome::Success => json!("goal_not_met"),
                        Outcome::Failure { reason, node, .. } => json!({ "node": node, "failure": reason }),
                    };
                    json!({ "seed": s, "reason": reason, "failed_checks": scenario.failed_checks(r.trace.final_world()) })
                })
                .collect();
            let ok = runs.iter().filter(|r| r.success()).count();
            print_json(&json!({
                "config_hash": hash,
                "scenario": scenario.name,
                "variant": cfg.variant,
                "rollouts": runs.len(),
                "successes": ok,
                "success_rate": if runs.is_empty() { 0.0 } else { ok as f64 / runs.len() as f64 },
                "failures": failures,
            }));
        }
        Command::Bench {
            sizes,
            repeats,
            sequential,
            out,
        } => {
            let mode = if sequential { ExecMode::Sequential } else { ExecMode::Parallel };
            let report = bench(&sizes, &cfg.learn, mode.effective(), repeats, first_seed, hash)?;
            print!("{}", report.table());
            if let Some(p) = out {
                write(&p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
        }
        Command::ExportDot { model, out } => {
            let dot = load_model(&model)?.to_dot();
            match out {
                Some(p) => write(&p, &dot)?,
                None => print!("{dot}"),
            }
        }
        Command::Scenario { out } => {
            let scenario = Scenario::resolve(&cfg.scenario)?;
            scenario.save(&out)?;
        }
        Command::Config { out } => match out {
            Some(p) => write(&p, &cfg.to_text())?,
            None => print!("{}", cfg.to_text()),
        },
        Command::Serve { port, host } => serve(cfg, &host, port)?,
    }
    Ok(())
}

fn serve(cfg: RunConfig, host: &str, port: u16) -> Result<()> {
    Scenario::resolve(&cfg.scenario)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        eprintln!("situ: serving on http://{}", listener.local_addr()?);
        axum::serve(listener, crate::server::router(cfg)).await?;
        Ok(())
    })
}
