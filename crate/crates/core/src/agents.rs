//! Behaviour of simulated human drivers and of the automated vehicles that
//! execute the cooperative plan.

use crate::scenario::{Scenario, VehicleState};
use crate::utility::{Game, Preference, UtilityParams};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Aggressive,
    Normal,
    Conservative,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Aggressive, Archetype::Normal, Archetype::Conservative];
}

/// Hidden true preferences of a simulated human driver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdvProfile {
    pub archetype: Archetype,
    pub true_alpha: f64,
    pub true_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetPreference {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchetypeConfig {
    pub aggressive: PresetPreference,
    pub normal: PresetPreference,
    pub conservative: PresetPreference,
    /// Sampling probabilities in the order aggressive, normal, conservative.
    pub mix: [f64; 3],
}

impl Default for ArchetypeConfig {
    fn default() -> Self {
        Self {
            aggressive: PresetPreference { alpha: 1.5, beta: 4.0 },
            normal: PresetPreference { alpha: 1.0, beta: 10.0 },
            conservative: PresetPreference { alpha: 0.6, beta: 18.0 },
            mix: [0.25, 0.5, 0.25],
        }
    }
}

impl ArchetypeConfig {
    pub fn preset(&self, a: Archetype) -> PresetPreference {
        match a {
            Archetype::Aggressive => self.aggressive,
            Archetype::Normal => self.normal,
            Archetype::Conservative => self.conservative,
        }
    }

    pub fn profile(&self, a: Archetype) -> HdvProfile {
        let p = self.preset(a);
        HdvProfile {
            archetype: a,
            true_alpha: p.alpha,
            true_beta: p.beta,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> HdvProfile {
        let total: f64 = self.mix.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (k, a) in Archetype::ALL.iter().enumerate() {
            acc += self.mix[k];
            if u < acc {
                return self.profile(*a);
            }
        }
        self.profile(Archetype::Conservative)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ActionSetError {
    #[error("action set must have exactly six entries, got {0}")]
    WrongCount(usize),
    #[error("action set must be sorted ascending")]
    Unsorted,
    #[error("action {0} outside [{1}, {2}]")]
    OutOfBounds(f64, f64, f64),
}

/// The six discrete accelerations available to a human driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActionSet([f64; 6]);

impl ActionSet {
    pub fn new(values: &[f64]) -> Result<Self, ActionSetError> {
        let arr: [f64; 6] = values.try_into().map_err(|_| ActionSetError::WrongCount(values.len()))?;
        if arr.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ActionSetError::Unsorted);
        }
        Ok(Self(arr))
    }

    pub fn check_bounds(&self, lo: f64, hi: f64) -> Result<(), ActionSetError> {
        match self.0.iter().find(|a| **a < lo || **a > hi) {
            Some(&a) => Err(ActionSetError::OutOfBounds(a, lo, hi)),
            None => Ok(()),
        }
    }

    pub fn values(&self) -> &[f64; 6] {
        &self.0
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[5]
    }

    pub fn contains(&self, a: f64) -> bool {
        self.0.contains(&a)
    }
}

impl Default for ActionSet {
    fn default() -> Self {
        Self([-4.0, -2.0, -1.0, 0.0, 1.0, 2.0])
    }
}

impl TryFrom<Vec<f64>> for ActionSet {
    type Error = ActionSetError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(&v)
    }
}

impl From<ActionSet> for Vec<f64> {
    fn from(a: ActionSet) -> Self {
        a.0.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdvConfig {
    pub actions: ActionSet,
    pub archetypes: ArchetypeConfig,
    pub desired_speed: f64,
    /// Proportional gain of speed tracking outside the cooperation radius.
    pub speed_gain: f64,
    /// Bumper-to-bumper gap kept to a vehicle ahead in the same lane.
    pub min_gap: f64,
    /// Lateral offset below which another vehicle counts as being in the lane.
    pub lane_tolerance: f64,
    /// Look-ahead of the following check (s).
    pub following_horizon: f64,
    /// Deceleration assumed for both vehicles in the stopping-distance check.
    pub following_brake: f64,
}

impl Default for HdvConfig {
    fn default() -> Self {
        Self {
            actions: ActionSet::default(),
            archetypes: ArchetypeConfig::default(),
            desired_speed: 10.0,
            speed_gain: 0.5,
            min_gap: 2.0,
            lane_tolerance: 0.5,
            following_horizon: 3.0,
            following_brake: 4.0,
        }
    }
}

/// Proportional tracking of the desired speed, limited to the action range.
pub fn track_desired_speed(v: f64, cfg: &HdvConfig) -> f64 {
    (cfg.speed_gain * (cfg.desired_speed - v)).clamp(cfg.actions.min(), cfg.actions.max())
}

/// Nearest vehicle ahead in the same lane: `(bumper gap, speed)`.
pub fn lane_leader(me: &VehicleState, others: &[VehicleState], scenario: &Scenario, tol: f64) -> Option<(f64, f64)> {
    let path = scenario.path(me.path);
    let mut best: Option<(f64, f64)> = None;
    for o in others.iter().filter(|o| o.id != me.id) {
        let (s_proj, lateral) = path.project_extended(scenario.path(o.path).locate(o.s));
        if lateral > tol || s_proj <= me.s {
            continue;
        }
        let gap = s_proj - me.s - 0.5 * (me.length + o.length);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, o.v));
        }
    }
    best
}

/// Whether holding `a` keeps a safe distance to a leader cruising at `v_lead`.
pub fn following_safe(gap: f64, v: f64, v_lead: f64, a: f64, cfg: &HdvConfig, v_max: f64) -> bool {
    let dt = 0.1;
    let steps = (cfg.following_horizon / dt).round() as usize;
    let (mut g, mut v) = (gap, v);
    for _ in 0..steps {
        let v_next = (v + a * dt).clamp(0.0, v_max);
        g += v_lead * dt - 0.5 * (v + v_next) * dt;
        v = v_next;
        if g < cfg.min_gap {
            return false;
        }
    }
    let b = cfg.following_brake;
    g + v_lead * v_lead / (2.0 * b) - v * v / (2.0 * b) >= cfg.min_gap
}

/// Per-candidate utilities of a human driver under its true preferences,
/// with every other vehicle predicted at constant velocity.
pub fn hdv_utilities(
    me: &VehicleState,
    others: &[VehicleState],
    profile: &HdvProfile,
    scenario: &Scenario,
    params: &UtilityParams,
    actions: &ActionSet,
) -> [f64; 6] {
    let mut vehicles = Vec::with_capacity(others.len() + 1);
    vehicles.push(me.clone());
    vehicles.extend(others.iter().filter(|o| o.id != me.id).cloned());
    let mut prefs = vec![Preference::new(1.0, 1.0, 1.0); vehicles.len()];
    prefs[0] = Preference::new(profile.true_alpha, profile.true_beta, 1.0);
    let game = Game::new(scenario, &vehicles, &prefs, params);
    let cruise = vec![0.0; params.horizon];
    let predicted: Vec<_> = (1..vehicles.len()).map(|j| game.rollout_vehicle(j, &cruise)).collect();
    let mut out = [0.0; 6];
    for (k, &a) in actions.values().iter().enumerate() {
        let own = game.rollout_vehicle(0, &vec![a; params.horizon]);
        let mut u = profile.true_alpha * game.self_term(0, &own);
        for (j, tj) in predicted.iter().enumerate() {
            u += profile.true_beta * game.pair_term(0, j + 1, &own, tj);
        }
        out[k] = u;
    }
    out
}

/// Best response of a human driver among the six actions; ties go to the
/// smaller magnitude. A vehicle ahead in the lane vetoes unsafe candidates.
pub fn hdv_decide(
    me: &VehicleState,
    others: &[VehicleState],
    profile: &HdvProfile,
    scenario: &Scenario,
    params: &UtilityParams,
    cfg: &HdvConfig,
) -> f64 {
    let utilities = hdv_utilities(me, others, profile, scenario, params, &cfg.actions);
    let leader = lane_leader(me, others, scenario, cfg.lane_tolerance);
    let mut order: Vec<usize> = (0..6).collect();
    let values = cfg.actions.values();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(values[a].total_cmp(&values[b])));
    let mut best: Option<(f64, f64)> = None;
    for k in order {
        let a = values[k];
        if let Some((gap, v_lead)) = leader {
            if !following_safe(gap, me.v, v_lead, a, cfg, params.v_max) {
                continue;
            }
        }
        let u = utilities[k];
        let tol = 1e-9 * u.abs().max(1.0);
        if best.is_none_or(|(bu, _)| u > bu + tol) {
            best = Some((u, a));
        }
    }
    best.map_or(cfg.actions.min(), |(_, a)| a)
}

/// First-interval acceleration of a vehicle's row in the solved plan, or
/// `fallback` when the vehicle took no part in the solve.
pub fn cav_apply(id: usize, ids: &[usize], profile: &crate::utility::ActionProfile, fallback: f64) -> f64 {
    match ids.iter().position(|&x| x == id) {
        Some(row) => profile.row(row)[0],
        None => {
            warn!("vehicle {id} missing from the solved plan, braking at {fallback}");
            fallback
        }
    }
}
