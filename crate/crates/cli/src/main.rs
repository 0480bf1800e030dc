use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use apg_core::metrics::{run_batch, write_artifacts};
use apg_core::{aggregate, validate_config, Ablation, BatchSummary, Scenario, ScenarioConfig, TrialOutcome};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "apg", version, about = "Cooperative driving simulations at an unsignalized intersection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a batch of trials at one penetration rate.
    Run(RunArgs),
    /// Run one batch per penetration rate.
    Sweep {
        /// Comma-separated penetration rates.
        #[arg(long, value_delimiter = ',', required = true)]
        penetrations: Vec<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Check a configuration file and print its effective form.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export the intersection layout as JSON.
    Geometry {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    penetration: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// First seed; trial k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated list of no-shapley, no-bp or none.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Also write one JSONL log per trial.
    #[arg(long)]
    trajectories: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => validate_config(p).with_context(|| format!("configuration {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn effective_config(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(p) = args.penetration {
        cfg.penetration = p;
    }
    if let Some(n) = args.trials {
        cfg.trials = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    cfg.validate().context("command-line overrides")?;
    Ok(cfg)
}

fn run_one(cfg: &ScenarioConfig, out: &Path, args: &RunArgs) -> Result<BatchSummary> {
    let scenario = Scenario::four_arm(&cfg.geometry);
    info!(
        "running {} trials at p = {} (ablation {}, config {})",
        cfg.trials,
        cfg.penetration,
        cfg.ablation,
        &cfg.digest()[..12]
    );
    let runs = run_batch(cfg, &scenario, args.jobs.max(1), args.trajectories)?;
    let outcomes: Vec<TrialOutcome> = runs.iter().map(|r| r.outcome.clone()).collect();
    let summary = aggregate(&outcomes, cfg.penetration);
    write_artifacts(out, &runs, &summary).with_context(|| format!("writing results to {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(summary)
}

fn print_summary(s: &BatchSummary) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "p={:.3} trials={} success={:.3} collision={:.3} timeout={:.3} mean_delay={} high_risk_pet={:.4} solver_failures={}",
        s.penetration,
        s.trials,
        s.success_rate,
        s.collision_rate,
        s.timeout_rate,
        fmt(s.mean_delay),
        s.high_risk_fraction,
        s.solver_failures
    );
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = effective_config(&args)?;
            let summary = run_one(&cfg, &args.out, &args)?;
            print_summary(&summary);
        }
        Command::Sweep { penetrations, run } => {
            let base = effective_config(&run)?;
            let mut rows = Vec::new();
            for p in penetrations {
                let mut cfg = base.clone();
                cfg.penetration = p;
                cfg.validate().with_context(|| format!("penetration {p}"))?;
                let out = run.out.join(format!("p{p:.3}"));
                let summary = run_one(&cfg, &out, &run)?;
                print_summary(&summary);
                rows.push(summary);
            }
            std::fs::create_dir_all(&run.out)?;
            let mut w = csv::Writer::from_path(run.out.join("sweep.csv"))?;
            w.write_record([
                "penetration",
                "trials",
                "success_rate",
                "collision_rate",
                "timeout_rate",
                "mean_delay_s",
                "high_risk_fraction",
                "solver_failures",
            ])?;
            for s in &rows {
                w.write_record([
                    format!("{:.6}", s.penetration),
                    s.trials.to_string(),
                    format!("{:.6}", s.success_rate),
                    format!("{:.6}", s.collision_rate),
                    format!("{:.6}", s.timeout_rate),
                    s.mean_delay.map_or(String::new(), |d| format!("{d:.6}")),
                    format!("{:.6}", s.high_risk_fraction),
                    s.solver_failures.to_string(),
                ])?;
            }
            w.flush()?;
        }
        Command::Validate { config } => {
            let cfg = load_config(Some(&config))?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            eprintln!("ok, digest {}", cfg.digest());
        }
        Command::Geometry { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let scenario = Scenario::four_arm(&cfg.geometry);
            let text = serde_json::to_string_pretty(&scenario.export_geometry())? + "\n";
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("APG_LOG_LEVEL", "warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
