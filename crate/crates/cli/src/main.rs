//! `c1lab` command-line scenario runner.
//!
//! Exit codes: 0 when the scenario's condition holds, 2 when a condition
//! check fails (the report is still written), 1 on any error.

mod experiments;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use scenario::{parse_grid, Scenario, EXPERIMENT_KINDS, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "c1lab", version, about = "Experiments on C1 Lorentzian metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write report.json plus CSV tables.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Comma-separated, strictly decreasing list of epsilon values.
        #[arg(long)]
        epsilon_grid: Option<String>,
    },
    /// Summarise a built-in metric.
    Describe { metric: String },
    ListMetrics,
    ListExperiments,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Run {
            config,
            seed,
            out_dir,
            epsilon_grid,
        } => run(&config, seed, out_dir, epsilon_grid),
        Command::Describe { metric } => {
            println!("{}", c1lab::geometry::describe(&metric)?);
            Ok(0)
        }
        Command::ListMetrics => {
            for m in c1lab::geometry::METRIC_NAMES {
                println!("{m}");
            }
            Ok(0)
        }
        Command::ListExperiments => {
            for e in EXPERIMENT_KINDS {
                println!("{e}");
            }
            Ok(0)
        }
    }
}

fn run(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>, grid: Option<String>) -> Result<u8> {
    let mut s = Scenario::load(config)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(g) = grid {
        s.epsilon_grid = Some(parse_grid(&g)?);
    }
    s.validate()?;
    let dir = out_dir
        .or_else(|| s.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("c1lab-out").join(&s.name));
    // The output location does not influence results, so it stays out of the hash.
    s.output_dir = None;
    let hash = s.config_hash();
    let outcome = experiments::run(&s)?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "scenario": s.name,
        "experiment": s.experiment.kind(),
        "metric": s.metric,
        "config_hash": hash,
        "seed": s.seed,
        "epsilon_grid": s.epsilon_grid(),
        "tolerances": outcome.tolerances,
        "pass": outcome.pass,
        "result": outcome.result,
        "tables": outcome.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(dir.join("report.json"), text + "\n")?;
    for t in &outcome.tables {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", t.name)))?;
        w.write_record(&t.header)?;
        for row in &t.rows {
            w.write_record(row.iter().map(|x| format!("{x:e}")))?;
        }
        w.flush()?;
    }
    println!(
        "{}: {} ({})",
        s.name,
        if outcome.pass { "pass" } else { "condition failed" },
        dir.join("report.json").display()
    );
    Ok(if outcome.pass { 0 } else { 2 })
}
