//! Trial outcomes (success, delay, post-encroachment time) and their
//! aggregation over batches, plus the batch runner and its artifacts.

use crate::config::ScenarioConfig;
use crate::engine::{run_trial, TrialLog, TrialStatus};
use crate::scenario::{Scenario, ScenarioError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetEvent {
    /// `(first, second)` in order of passage.
    pub pair: (usize, usize),
    pub paths: (usize, usize),
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub penetration: f64,
    pub status: TrialStatus,
    /// Per vehicle; `None` for vehicles that never reached their path end.
    pub delays: Vec<(usize, Option<f64>)>,
    pub mean_delay: Option<f64>,
    pub pet_events: Vec<PetEvent>,
    pub min_pet: Option<f64>,
    pub n_high_risk_pet: usize,
    pub solver_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub penetration: f64,
    pub trials: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    /// Mean over every vehicle that exited, in every trial.
    pub mean_delay: Option<f64>,
    pub pet_events: usize,
    pub high_risk_pet_events: usize,
    /// Fraction of PET events below the threshold, collision trials excluded.
    pub high_risk_fraction: f64,
    pub solver_failures: usize,
}

/// Time at which the vehicle's arclength first reaches `target`, linearly
/// interpolated between records.
fn crossing_time(series: &[(f64, f64)], target: f64) -> Option<f64> {
    let first = series.first()?;
    if first.1 >= target {
        return Some(first.0);
    }
    series.windows(2).find_map(|w| {
        let ((t0, s0), (t1, s1)) = (w[0], w[1]);
        (s0 < target && s1 >= target).then(|| t0 + (t1 - t0) * (target - s0) / (s1 - s0))
    })
}

fn series_of(log: &TrialLog) -> HashMap<usize, Vec<(f64, f64)>> {
    let mut out: HashMap<usize, Vec<(f64, f64)>> = HashMap::new();
    for r in &log.records {
        for v in &r.vehicles {
            out.entry(v.id).or_default().push((r.time, v.s));
        }
    }
    out
}

/// Traversal time beyond free flow at `desired_speed`; `None` if the vehicle
/// never reached the end of its path.
pub fn compute_delay(log: &TrialLog, id: usize, desired_speed: f64) -> Option<f64> {
    let info = log.header.vehicles.iter().find(|v| v.id == id)?;
    let exit = log.end.exits.iter().find(|(v, _)| *v == id)?.1;
    let free_flow = (info.path_length - info.s0) / desired_speed;
    Some((exit - free_flow).max(0.0))
}

/// Post-encroachment times at every conflict zone traversed by two vehicles.
pub fn compute_pet(log: &TrialLog, scenario: &Scenario) -> Vec<PetEvent> {
    let series = series_of(log);
    let vehicles = &log.header.vehicles;
    let r = scenario.zone_radius;
    let mut events = Vec::new();
    for (a, va) in vehicles.iter().enumerate() {
        for vb in &vehicles[a + 1..] {
            let Some((cp_a, cp_b)) = scenario.conflict_arclengths(va.path, vb.path) else {
                continue;
            };
            let (Some(sa), Some(sb)) = (series.get(&va.id), series.get(&vb.id)) else {
                continue;
            };
            let (in_a, out_a) = (crossing_time(sa, cp_a - r), crossing_time(sa, cp_a + r));
            let (in_b, out_b) = (crossing_time(sb, cp_b - r), crossing_time(sb, cp_b + r));
            let (Some(in_a), Some(in_b)) = (in_a, in_b) else {
                continue;
            };
            let (first, second, out_first, in_second, paths) = if in_a <= in_b {
                (va.id, vb.id, out_a, in_b, (va.path, vb.path))
            } else {
                (vb.id, va.id, out_b, in_a, (vb.path, va.path))
            };
            // second entered while the first had not left: zero encroachment margin
            let value = out_first.map_or(0.0, |t| (in_second - t).max(0.0));
            events.push(PetEvent {
                pair: (first, second),
                paths,
                value,
            });
        }
    }
    events
}

pub fn evaluate(log: &TrialLog, scenario: &Scenario, cfg: &ScenarioConfig) -> TrialOutcome {
    let delays: Vec<(usize, Option<f64>)> = log
        .header
        .vehicles
        .iter()
        .map(|v| (v.id, compute_delay(log, v.id, cfg.desired_speed)))
        .collect();
    let exited: Vec<f64> = delays.iter().filter_map(|d| d.1).collect();
    let mean_delay = (!exited.is_empty()).then(|| exited.iter().sum::<f64>() / exited.len() as f64);
    let pet_events = compute_pet(log, scenario);
    let min_pet = pet_events.iter().map(|e| e.value).reduce(f64::min);
    let n_high_risk_pet = pet_events.iter().filter(|e| e.value < cfg.high_risk_pet).count();
    TrialOutcome {
        seed: log.header.seed,
        penetration: log.header.penetration,
        status: log.end.status,
        delays,
        mean_delay,
        pet_events,
        min_pet,
        n_high_risk_pet,
        solver_failures: log.end.solver_failures,
    }
}

/// Proportions and means over a nonempty batch.
pub fn aggregate(outcomes: &[TrialOutcome], penetration: f64) -> BatchSummary {
    assert!(!outcomes.is_empty(), "aggregate needs at least one trial");
    let n = outcomes.len();
    let count = |s: TrialStatus| outcomes.iter().filter(|o| o.status == s).count();
    let (successes, collisions, timeouts) = (
        count(TrialStatus::Success),
        count(TrialStatus::Collision),
        count(TrialStatus::Timeout),
    );
    let delays: Vec<f64> = outcomes.iter().flat_map(|o| o.delays.iter().filter_map(|d| d.1)).collect();
    let mean_delay = (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64);
    let safe = outcomes.iter().filter(|o| o.status != TrialStatus::Collision);
    let (pet_events, high_risk) = safe.fold((0, 0), |(e, h), o| (e + o.pet_events.len(), h + o.n_high_risk_pet));
    BatchSummary {
        penetration,
        trials: n,
        successes,
        collisions,
        timeouts,
        success_rate: successes as f64 / n as f64,
        collision_rate: collisions as f64 / n as f64,
        timeout_rate: timeouts as f64 / n as f64,
        mean_delay,
        pet_events,
        high_risk_pet_events: high_risk,
        high_risk_fraction: if pet_events == 0 {
            0.0
        } else {
            high_risk as f64 / pet_events as f64
        },
        solver_failures: outcomes.iter().map(|o| o.solver_failures).sum(),
    }
}

/// Column order of `trials.csv`.
pub const TRIAL_COLUMNS: [&str; 7] = [
    "seed",
    "penetration",
    "status",
    "mean_delay_s",
    "min_pet_s",
    "n_high_risk_pet",
    "solver_failures",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn write_trials_csv<W: std::io::Write>(outcomes: &[TrialOutcome], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TRIAL_COLUMNS)?;
    for o in outcomes {
        wr.write_record([
            o.seed.to_string(),
            format!("{}", o.penetration),
            o.status.as_str().to_string(),
            opt(o.mean_delay),
            opt(o.min_pet),
            o.n_high_risk_pet.to_string(),
            o.solver_failures.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// One finished trial: its outcome and, when requested, the full log.
pub struct TrialRun {
    pub outcome: TrialOutcome,
    pub log: Option<TrialLog>,
}

/// Runs trials `seed .. seed + trials` on `jobs` threads; results come back
/// in seed order.
pub fn run_batch(
    cfg: &ScenarioConfig,
    scenario: &Scenario,
    jobs: usize,
    keep_logs: bool,
) -> Result<Vec<TrialRun>, ScenarioError> {
    let seeds: Vec<u64> = (0..cfg.trials as u64).map(|k| cfg.seed + k).collect();
    let one = |seed: &u64| -> Result<TrialRun, ScenarioError> {
        let log = run_trial(cfg, scenario, *seed)?;
        let outcome = evaluate(&log, scenario, cfg);
        Ok(TrialRun {
            outcome,
            log: keep_logs.then_some(log),
        })
    };
    if jobs <= 1 {
        return seeds.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| seeds.par_iter().map(one).collect())
}

/// Writes `trials.csv`, `summary.json` and, for kept logs, `trial_<seed>.jsonl`.
pub fn write_artifacts(out: &Path, runs: &[TrialRun], summary: &BatchSummary) -> std::io::Result<()> {
    std::fs::create_dir_all(out)?;
    let outcomes: Vec<TrialOutcome> = runs.iter().map(|r| r.outcome.clone()).collect();
    let file = std::fs::File::create(out.join("trials.csv"))?;
    write_trials_csv(&outcomes, std::io::BufWriter::new(file)).map_err(std::io::Error::other)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    for run in runs {
        if let Some(log) = &run.log {
            let file = std::fs::File::create(out.join(format!("trial_{}.jsonl", log.header.seed)))?;
            log.write_jsonl(std::io::BufWriter::new(file))?;
        }
    }
    Ok(())
}
