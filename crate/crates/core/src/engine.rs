//! Closed-loop simulation: cooperation-set management, the per-step
//! cooperative solve, driver decisions, preference and weight updates,
//! kinematic integration and logging.

use crate::agents::{cav_apply, hdv_decide, track_desired_speed, HdvProfile};
use crate::config::{Ablation, ScenarioConfig};
use crate::preference::{bp_update, estimated_action_for, BpContext, PreferenceUpdateRecord, SolveSnapshot};
use crate::scenario::{spawn_vehicles, Point2, Scenario, ScenarioError, VehicleKind, VehicleState};
use crate::shapley::{batched_shapley, coarsen_batches, normalize_weights, RewardLedger, WEIGHT_FLOOR};
use crate::solver::{solve, GameProblem, Objective, PenaltyWeights, SolveResult, SolveStatus};
use crate::utility::{ActionProfile, Game, Preference};
use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldVehicle {
    pub state: VehicleState,
    pub hdv: Option<HdvProfile>,
    /// Current estimate for human drivers, fixed values for automated ones.
    pub pref: Preference,
    pub exit_time: Option<f64>,
    pub removed: bool,
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub time: f64,
    pub step: usize,
    pub vehicles: Vec<WorldVehicle>,
    pub last_solve: Option<SolveSnapshot>,
    /// Ids inside the cooperation radius at the latest step.
    pub coop: Vec<usize>,
}

impl WorldState {
    pub fn new(vehicles: Vec<VehicleState>, hdv: Vec<Option<HdvProfile>>, cfg: &ScenarioConfig) -> Self {
        let vehicles = vehicles
            .into_iter()
            .zip(hdv)
            .map(|(state, hdv)| {
                let pref = match state.kind {
                    VehicleKind::Cav => Preference::new(cfg.cav.alpha, cfg.cav.beta, 1.0),
                    VehicleKind::Hdv => Preference::new(cfg.preference.init_alpha, cfg.preference.init_beta, 1.0),
                };
                WorldVehicle {
                    state,
                    hdv,
                    pref,
                    exit_time: None,
                    removed: false,
                }
            })
            .collect();
        Self {
            time: 0.0,
            step: 0,
            vehicles,
            last_solve: None,
            coop: Vec::new(),
        }
    }

    pub fn active(&self) -> impl Iterator<Item = &WorldVehicle> {
        self.vehicles.iter().filter(|v| !v.removed)
    }

    pub fn all_removed(&self) -> bool {
        self.vehicles.iter().all(|v| v.removed)
    }
}

/// Oriented footprint of a vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub center: Point2,
    pub heading: (f64, f64),
    pub half_length: f64,
    pub half_width: f64,
}

impl Footprint {
    pub fn of(state: &VehicleState, scenario: &Scenario) -> Self {
        let path = scenario.path(state.path);
        Self {
            center: path.locate(state.s),
            heading: path.tangent(state.s),
            half_length: 0.5 * state.length,
            half_width: 0.5 * state.width,
        }
    }

    fn radius_along(&self, axis: (f64, f64)) -> f64 {
        let (ux, uy) = self.heading;
        self.half_length * (ux * axis.0 + uy * axis.1).abs() + self.half_width * (-uy * axis.0 + ux * axis.1).abs()
    }

    /// Separating-axis overlap test.
    pub fn overlaps(&self, other: &Footprint) -> bool {
        let d = (other.center.x - self.center.x, other.center.y - self.center.y);
        let axes = [
            self.heading,
            (-self.heading.1, self.heading.0),
            other.heading,
            (-other.heading.1, other.heading.0),
        ];
        axes.iter().all(|&ax| {
            let dist = (d.0 * ax.0 + d.1 * ax.1).abs();
            dist <= self.radius_along(ax) + other.radius_along(ax)
        })
    }
}

/// First overlapping pair (by index order) among `vehicles`.
pub fn detect_collision(vehicles: &[VehicleState], scenario: &Scenario) -> Option<(usize, usize)> {
    let prints: Vec<Footprint> = vehicles.iter().map(|v| Footprint::of(v, scenario)).collect();
    for i in 0..prints.len() {
        for j in i + 1..prints.len() {
            // cheap reject before the axis tests
            let reach = prints[i].half_length + prints[i].half_width + prints[j].half_length + prints[j].half_width;
            if prints[i].center.distance(prints[j].center) > reach {
                continue;
            }
            if prints[i].overlaps(&prints[j]) {
                return Some((vehicles[i].id, vehicles[j].id));
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub status: SolveStatus,
    pub iterations: usize,
    pub residual: f64,
    pub max_violation: f64,
    pub failure: bool,
}

/// A solved plan with the solver's report.
#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub profile: ActionProfile,
    pub result: SolveResult,
    pub failure: bool,
}

/// Shifts each row forward by `dt_ctrl` of the planning grid, holding the
/// last value.
pub fn shift_profile_row(row: &[f64], fraction: f64) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|t| {
            let next = row[(t + 1).min(n - 1)];
            (1.0 - fraction) * row[t] + fraction * next
        })
        .collect()
}

/// Solves the cooperative game from a warm start, seeded by a discrete
/// improvement path over constant accelerations.
pub fn solve_plan(game: &Game<'_>, warm: &ActionProfile, bounds: &[(f64, f64)], cfg: &ScenarioConfig) -> PlanOutcome {
    let n = game.len();
    let problem = GameProblem::new(game, warm.clone(), (0..n).collect(), bounds, cfg.constraints.clone());
    let pen = PenaltyWeights {
        lambda: cfg.solver.lambda,
        mu: cfg.solver.mu_pen,
    };
    let mut x_warm = problem.pack(warm);
    for (k, x) in x_warm.iter_mut().enumerate() {
        *x = x.clamp(problem.lower()[k], problem.upper()[k]);
    }
    let x_seed = problem.improvement_path(&x_warm, &cfg.seed_grid, cfg.seed_sweeps, &pen);
    let start = if problem.merit(&x_seed, &pen) < problem.merit(&x_warm, &pen) {
        x_seed
    } else {
        x_warm
    };
    let result = solve(&problem, &start, &cfg.solver);
    let finite = result.x.iter().all(|x| x.is_finite()) && result.merit.is_finite();
    let failure = !finite;
    let profile = if finite { problem.unpack(&result.x) } else { warm.clone() };
    PlanOutcome {
        profile,
        result,
        failure,
    }
}

/// Everything that happened during one control step.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    pub solver: Option<SolverDiagnostics>,
    pub preference_updates: Vec<PreferenceUpdateRecord>,
    pub actions: Vec<(usize, f64)>,
    pub collision: Option<(usize, usize)>,
}

/// Advances the world by one control interval.
pub fn step(world: &mut WorldState, scenario: &Scenario, cfg: &ScenarioConfig, ablation: Ablation) -> StepReport {
    step_with(world, scenario, cfg, ablation, None)
}

/// As [`step`], with optional scripted accelerations that replace every
/// decision (used to probe the collision detector).
pub fn step_with(
    world: &mut WorldState,
    scenario: &Scenario,
    cfg: &ScenarioConfig,
    ablation: Ablation,
    scripted: Option<&dyn Fn(&VehicleState) -> f64>,
) -> StepReport {
    let mut report = StepReport::default();
    let params = &cfg.utility;

    // (1) cooperation set
    let coop_idx: Vec<usize> = (0..world.vehicles.len())
        .filter(|&k| {
            let v = &world.vehicles[k];
            !v.removed && scenario.path(v.state.path).locate(v.state.s).distance(scenario.center) <= scenario.coop_radius
        })
        .collect();
    world.coop = coop_idx.iter().map(|&k| world.vehicles[k].state.id).collect();

    // (2) cooperative solve
    let mut current: Option<SolveSnapshot> = None;
    let mut failure = false;
    if !coop_idx.is_empty() && scripted.is_none() {
        let states: Vec<VehicleState> = coop_idx.iter().map(|&k| world.vehicles[k].state).collect();
        let prefs: Vec<Preference> = coop_idx
            .iter()
            .map(|&k| {
                let mut p = world.vehicles[k].pref;
                if ablation.no_shapley {
                    p.phi = 1.0;
                }
                p
            })
            .collect();
        let bounds: Vec<(f64, f64)> = states
            .iter()
            .map(|s| match s.kind {
                VehicleKind::Cav => (params.a_min, params.a_max),
                VehicleKind::Hdv => (cfg.hdv.actions.min(), cfg.hdv.actions.max()),
            })
            .collect();
        let fraction = (cfg.dt_ctrl / params.dt_plan).min(1.0);
        let rows: Vec<Vec<f64>> = states
            .iter()
            .map(|s| match estimated_action_for(s.id, world.last_solve.as_ref()) {
                Some(row) => shift_profile_row(&row, fraction),
                None => vec![0.0; params.horizon],
            })
            .collect();
        let warm = ActionProfile::from_rows(&rows);
        let game = Game::new(scenario, &states, &prefs, params);
        let plan = solve_plan(&game, &warm, &bounds, cfg);
        failure = plan.failure;
        report.solver = Some(SolverDiagnostics {
            status: plan.result.status,
            iterations: plan.result.iterations,
            residual: plan.result.residual,
            max_violation: plan.result.max_violation,
            failure,
        });
        if failure {
            warn!("t={:.1}: cooperative solve failed, automated vehicles brake", world.time);
        }
        current = Some(SolveSnapshot {
            ids: states.iter().map(|s| s.id).collect(),
            states,
            prefs,
            bounds,
            profile: plan.profile,
        });
    }

    // (3) decisions
    let coop_states: Vec<VehicleState> = coop_idx.iter().map(|&k| world.vehicles[k].state).collect();
    let mut accels = vec![0.0; world.vehicles.len()];
    for (k, wv) in world.vehicles.iter().enumerate() {
        if wv.removed {
            continue;
        }
        let in_coop = coop_idx.contains(&k);
        let a = if let Some(script) = scripted {
            script(&wv.state)
        } else {
            match (wv.state.kind, in_coop) {
                (VehicleKind::Cav, true) => match (&current, failure) {
                    (Some(snap), false) => cav_apply(wv.state.id, &snap.ids, &snap.profile, cfg.cav.fallback_accel),
                    _ => cfg.cav.fallback_accel,
                },
                (VehicleKind::Hdv, true) => {
                    let profile = wv.hdv.as_ref().expect("human-driven vehicles carry a profile");
                    hdv_decide(&wv.state, &coop_states, profile, scenario, params, &cfg.hdv)
                }
                (_, false) => track_desired_speed(wv.state.v, &cfg.hdv),
            }
        };
        accels[k] = a.clamp(params.a_min, params.a_max);
        report.actions.push((wv.state.id, accels[k]));
    }

    // (4) preference estimation from the previous solve and the last observed interval
    if !ablation.no_bp && scripted.is_none() {
        if let Some(prev) = world.last_solve.as_ref() {
            let game = Game::new(scenario, &prev.states, &prev.prefs, params);
            for &k in &coop_idx {
                let wv = &world.vehicles[k];
                if wv.state.kind != VehicleKind::Hdv {
                    continue;
                }
                let Some(row) = prev.row_of(wv.state.id) else {
                    continue;
                };
                let estimated = prev.profile.row(row).to_vec();
                let observed = wv.state.a;
                let ctx = BpContext {
                    game: &game,
                    snapshot: prev,
                    row,
                    constraints: &cfg.constraints,
                    solver: &cfg.solver,
                    seed_grid: &cfg.seed_grid,
                };
                let ((alpha, beta), record) = bp_update(
                    (wv.pref.alpha, wv.pref.beta),
                    &estimated,
                    observed,
                    &ctx,
                    &cfg.preference,
                    world.step,
                );
                let wv = &mut world.vehicles[k];
                wv.pref.alpha = alpha;
                wv.pref.beta = beta;
                report.preference_updates.push(record);
            }
        }
    }

    // (5) Shapley weights from the solved plan
    if !ablation.no_shapley {
        if let (Some(snap), false) = (&current, failure) {
            let game = Game::new(scenario, &snap.states, &snap.prefs, params);
            let trajs = game.rollout_all(&snap.profile);
            let ledger = RewardLedger::from_game(&game, &trajs);
            let batches = coarsen_batches(&snap.states, cfg.shapley.headway_threshold, cfg.shapley.max_batch);
            let phi = normalize_weights(&batched_shapley(&ledger, &batches));
            for (k, wv) in world.vehicles.iter_mut().enumerate() {
                wv.pref.phi = match coop_idx.iter().position(|&c| c == k) {
                    Some(pos) => phi[pos],
                    None => WEIGHT_FLOOR,
                };
            }
        }
    }

    // (6) kinematics
    let dt = cfg.dt_ctrl;
    let t0 = world.time;
    for (k, wv) in world.vehicles.iter_mut().enumerate() {
        if wv.removed {
            continue;
        }
        let st = &mut wv.state;
        let v_next = (st.v + accels[k] * dt).clamp(0.0, params.v_max);
        let a_eff = (v_next - st.v) / dt;
        let s_prev = st.s;
        st.s += st.v * dt + 0.5 * a_eff * dt * dt;
        st.v = v_next;
        st.a = a_eff;
        let length = scenario.path(st.path).total_length;
        if wv.exit_time.is_none() && st.s >= length {
            let frac = if st.s > s_prev { (length - s_prev) / (st.s - s_prev) } else { 1.0 };
            wv.exit_time = Some(t0 + frac * dt);
        }
        if st.s >= length + cfg.removal_margin {
            wv.removed = true;
            debug!("vehicle {} left the simulation at t={:.1}", st.id, t0 + dt);
        }
    }
    world.time = t0 + dt;
    world.step += 1;
    if current.is_some() {
        world.last_solve = current;
    }

    // (7) safety check on the new positions
    let active: Vec<VehicleState> = world.active().map(|v| v.state).collect();
    report.collision = detect_collision(&active, scenario);
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Success,
    Collision,
    Timeout,
}

impl TrialStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Success => "success",
            TrialStatus::Collision => "collision",
            TrialStatus::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleInfo {
    pub id: usize,
    pub path: usize,
    pub kind: VehicleKind,
    pub hdv: Option<HdvProfile>,
    pub s0: f64,
    pub v0: f64,
    pub path_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialHeader {
    pub seed: u64,
    pub config_digest: String,
    pub penetration: f64,
    pub ablation: String,
    pub dt_ctrl: f64,
    pub vehicles: Vec<VehicleInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleSnapshot {
    pub id: usize,
    pub s: f64,
    pub v: f64,
    pub a: f64,
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub vehicles: Vec<VehicleSnapshot>,
    pub solver: Option<SolverDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub preference_updates: Vec<PreferenceUpdateRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEnd {
    pub status: TrialStatus,
    pub end_time: f64,
    pub collision: Option<(usize, usize)>,
    /// `(id, exit time)` for every vehicle that reached the end of its path.
    pub exits: Vec<(usize, f64)>,
    pub solver_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub header: TrialHeader,
    pub records: Vec<StepRecord>,
    pub end: TrialEnd,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine<'a> {
    Header(&'a TrialHeader),
    Step(&'a StepRecord),
    Summary(&'a TrialEnd),
}

impl TrialLog {
    /// Line-delimited JSON: a header, one line per step, then a summary.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut line = |l: &LogLine<'_>| -> std::io::Result<()> {
            serde_json::to_writer(&mut w, l)?;
            w.write_all(b"\n")
        };
        line(&LogLine::Header(&self.header))?;
        for r in &self.records {
            line(&LogLine::Step(r))?;
        }
        line(&LogLine::Summary(&self.end))?;
        Ok(())
    }
}

fn snapshot_of(world: &WorldState, scenario: &Scenario, report: Option<StepReport>) -> StepRecord {
    let vehicles = world
        .active()
        .map(|v| {
            let p = scenario.path(v.state.path).locate(v.state.s);
            VehicleSnapshot {
                id: v.state.id,
                s: v.state.s,
                v: v.state.v,
                a: v.state.a,
                x: p.x,
                y: p.y,
                phi: v.pref.phi,
                alpha: v.pref.alpha,
                beta: v.pref.beta,
            }
        })
        .collect();
    let (solver, preference_updates) = match report {
        Some(r) => (r.solver, r.preference_updates),
        None => (None, Vec::new()),
    };
    StepRecord {
        step: world.step,
        time: world.time,
        vehicles,
        solver,
        preference_updates,
    }
}

/// Spawns the vehicles of trial `seed` and draws the human drivers' archetypes.
pub fn initial_world(cfg: &ScenarioConfig, scenario: &Scenario, seed: u64) -> Result<WorldState, ScenarioError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vehicles = spawn_vehicles(scenario, cfg.n_vehicles, cfg.penetration, &cfg.spawn, &mut rng)?;
    let hdv = vehicles
        .iter()
        .map(|v| (v.kind == VehicleKind::Hdv).then(|| cfg.hdv.archetypes.sample(&mut rng)))
        .collect();
    Ok(WorldState::new(vehicles, hdv, cfg))
}

/// Runs the world until every vehicle has left, the time limit passes or two
/// vehicles overlap.
pub fn run_world(
    mut world: WorldState,
    scenario: &Scenario,
    cfg: &ScenarioConfig,
    ablation: Ablation,
    header: TrialHeader,
    scripted: Option<&dyn Fn(&VehicleState) -> f64>,
) -> TrialLog {
    let mut records = vec![snapshot_of(&world, scenario, None)];
    let max_steps = (cfg.time_limit / cfg.dt_ctrl).round() as usize;
    let mut solver_failures = 0;
    let mut collision = None;
    while !world.all_removed() && world.step < max_steps {
        let report = step_with(&mut world, scenario, cfg, ablation, scripted);
        if report.solver.as_ref().is_some_and(|d| d.failure) {
            solver_failures += 1;
        }
        collision = report.collision;
        records.push(snapshot_of(&world, scenario, Some(report)));
        if collision.is_some() {
            break;
        }
    }
    let status = if collision.is_some() {
        TrialStatus::Collision
    } else if world.all_removed() && world.vehicles.iter().all(|v| v.exit_time.is_some_and(|t| t <= cfg.time_limit)) {
        TrialStatus::Success
    } else {
        TrialStatus::Timeout
    };
    let exits = world.vehicles.iter().filter_map(|v| v.exit_time.map(|t| (v.state.id, t))).collect();
    TrialLog {
        header,
        records,
        end: TrialEnd {
            status,
            end_time: world.time,
            collision,
            exits,
            solver_failures,
        },
    }
}

fn header_for(world: &WorldState, scenario: &Scenario, cfg: &ScenarioConfig, seed: u64, ablation: Ablation) -> TrialHeader {
    TrialHeader {
        seed,
        config_digest: cfg.digest(),
        penetration: cfg.penetration,
        ablation: ablation.to_string(),
        dt_ctrl: cfg.dt_ctrl,
        vehicles: world
            .vehicles
            .iter()
            .map(|v| VehicleInfo {
                id: v.state.id,
                path: v.state.path,
                kind: v.state.kind,
                hdv: v.hdv,
                s0: v.state.s,
                v0: v.state.v,
                path_length: scenario.path(v.state.path).total_length,
            })
            .collect(),
    }
}

/// One seeded trial under `cfg` (its `ablation` field selects the variant).
pub fn run_trial(cfg: &ScenarioConfig, scenario: &Scenario, seed: u64) -> Result<TrialLog, ScenarioError> {
    let world = initial_world(cfg, scenario, seed)?;
    let header = header_for(&world, scenario, cfg, seed, cfg.ablation);
    Ok(run_world(world, scenario, cfg, cfg.ablation, header, None))
}

/// A trial driven by scripted accelerations instead of the solver and the
/// driver models.
pub fn run_scripted(
    cfg: &ScenarioConfig,
    scenario: &Scenario,
    vehicles: Vec<VehicleState>,
    script: &dyn Fn(&VehicleState) -> f64,
) -> TrialLog {
    let hdv = vehicles.iter().map(|_| None).collect();
    let world = WorldState::new(vehicles, hdv, cfg);
    let header = header_for(&world, scenario, cfg, 0, Ablation::BOTH);
    run_world(world, scenario, cfg, Ablation::BOTH, header, Some(script))
}
