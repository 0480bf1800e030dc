//! Experiment configuration: one JSON document whose missing fields take
//! their defaults, validated field by field.

use crate::agents::HdvConfig;
use crate::preference::PreferenceConfig;
use crate::scenario::{GeometryConfig, SpawnConfig};
use crate::solver::{ConstraintConfig, SolverOptions};
use crate::utility::UtilityParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Which adaptive components are frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_shapley: bool,
    pub no_bp: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        no_shapley: false,
        no_bp: false,
    };
    pub const BOTH: Ablation = Ablation {
        no_shapley: true,
        no_bp: true,
    };
}

impl FromStr for Ablation {
    type Err = String;

    /// Parses `none`, `no-shapley`, `no-bp` or a comma-separated combination.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Ablation::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "no-shapley" => out.no_shapley = true,
                "no-bp" => out.no_bp = true,
                other => return Err(format!("unknown ablation '{other}' (expected no-shapley, no-bp or none)")),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.no_shapley, self.no_bp) {
            (false, false) => f.write_str("none"),
            (true, false) => f.write_str("no-shapley"),
            (false, true) => f.write_str("no-bp"),
            (true, true) => f.write_str("no-shapley,no-bp"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapleyConfig {
    /// Same-path gap below which consecutive vehicles share a supernode.
    pub headway_threshold: f64,
    pub max_batch: usize,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self {
            headway_threshold: 8.0,
            max_batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Acceleration applied by every automated vehicle when the solve fails.
    pub fallback_accel: f64,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            fallback_accel: -2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_vehicles: usize,
    pub penetration: f64,
    pub trials: usize,
    pub seed: u64,
    pub dt_ctrl: f64,
    pub time_limit: f64,
    /// Distance past the path end at which a vehicle leaves the simulation.
    pub removal_margin: f64,
    /// Free-flow reference speed for delay.
    pub desired_speed: f64,
    /// PET below this value (s) is a high-risk event.
    pub high_risk_pet: f64,
    pub ablation: Ablation,
    pub geometry: GeometryConfig,
    pub spawn: SpawnConfig,
    pub utility: UtilityParams,
    pub constraints: ConstraintConfig,
    pub solver: SolverOptions,
    /// Constant accelerations tried by the discrete improvement path that
    /// seeds each solve.
    pub seed_grid: Vec<f64>,
    pub seed_sweeps: usize,
    pub preference: PreferenceConfig,
    pub hdv: HdvConfig,
    pub cav: CavConfig,
    pub shapley: ShapleyConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 8,
            penetration: 0.375,
            trials: 100,
            seed: 0,
            dt_ctrl: 0.1,
            time_limit: 40.0,
            removal_margin: 10.0,
            desired_speed: 10.0,
            high_risk_pet: 1.0,
            ablation: Ablation::NONE,
            geometry: GeometryConfig::default(),
            spawn: SpawnConfig::default(),
            utility: UtilityParams::default(),
            constraints: ConstraintConfig::default(),
            solver: SolverOptions::default(),
            seed_grid: vec![-6.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0],
            seed_sweeps: 4,
            preference: PreferenceConfig::default(),
            hdv: HdvConfig::default(),
            cav: CavConfig::default(),
            shapley: ShapleyConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl ConfigError {
    pub fn problems(&self) -> Vec<String> {
        match self {
            ConfigError::Invalid(p) => p.clone(),
            other => vec![other.to_string()],
        }
    }
}

fn unknown_keys(doc: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(r)) = (doc, reference) else {
        return;
    };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(format!("{path}: unknown key")),
            Some(rv) => unknown_keys(v, rv, &path, out),
        }
    }
}

impl ScenarioConfig {
    /// Parses a JSON document, reporting every unknown key and range violation.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let doc: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text)?
        };
        if !doc.is_object() {
            return Err(ConfigError::Invalid(vec!["top level must be a JSON object".into()]));
        }
        let reference = serde_json::to_value(ScenarioConfig::default())?;
        let mut problems = Vec::new();
        unknown_keys(&doc, &reference, "", &mut problems);
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        let cfg: ScenarioConfig = serde_json::from_value(doc).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string());
            }
        };
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;

        check(self.n_vehicles >= 1, "n_vehicles: must be at least 1");
        check((0.0..=1.0).contains(&self.penetration), "penetration: must be in [0, 1]");
        check(self.trials >= 1, "trials: must be at least 1");
        check(pos(self.dt_ctrl), "dt_ctrl: must be positive");
        check(pos(self.time_limit), "time_limit: must be positive");
        check(nonneg(self.removal_margin), "removal_margin: must be nonnegative");
        check(pos(self.desired_speed), "desired_speed: must be positive");
        check(pos(self.high_risk_pet), "high_risk_pet: must be positive");

        let g = &self.geometry;
        check(pos(g.lane_width), "geometry.lane_width: must be positive");
        check(pos(g.box_half_size), "geometry.box_half_size: must be positive");
        check(g.box_half_size > g.lane_width, "geometry.box_half_size: must exceed lane_width");
        check(pos(g.approach_length), "geometry.approach_length: must be positive");
        check(pos(g.exit_length), "geometry.exit_length: must be positive");
        check(g.arc_segments >= 2, "geometry.arc_segments: must be at least 2");
        check(pos(g.zone_radius), "geometry.zone_radius: must be positive");
        check(pos(g.coop_radius), "geometry.coop_radius: must be positive");
        check(pos(g.interaction_distance), "geometry.interaction_distance: must be positive");

        let s = &self.spawn;
        check(nonneg(s.upstream_min), "spawn.upstream_min: must be nonnegative");
        check(s.upstream_max >= s.upstream_min, "spawn.upstream_max: must be >= upstream_min");
        check(s.upstream_max < g.approach_length, "spawn.upstream_max: must be below geometry.approach_length");
        check(nonneg(s.speed_min), "spawn.speed_min: must be nonnegative");
        check(s.speed_max >= s.speed_min, "spawn.speed_max: must be >= speed_min");
        check(s.speed_max <= self.utility.v_max, "spawn.speed_max: must not exceed utility.v_max");
        check(nonneg(s.min_headway), "spawn.min_headway: must be nonnegative");
        check(pos(s.vehicle_length), "spawn.vehicle_length: must be positive");
        check(pos(s.vehicle_width), "spawn.vehicle_width: must be positive");

        let u = &self.utility;
        check(u.gamma > 0.0 && u.gamma <= 1.0, "utility.gamma: must be in (0, 1]");
        check(u.horizon >= 1, "utility.horizon: must be at least 1");
        check(pos(u.dt_plan), "utility.dt_plan: must be positive");
        check(pos(u.v_max), "utility.v_max: must be positive");
        check(u.a_min < 0.0 && u.a_max > 0.0, "utility.a_min/a_max: need a_min < 0 < a_max");
        let w = &u.reward;
        check(nonneg(w.w_speed), "utility.reward.w_speed: must be nonnegative");
        check(nonneg(w.w_dist), "utility.reward.w_dist: must be nonnegative");
        check(nonneg(w.w_comfort), "utility.reward.w_comfort: must be nonnegative");
        check(pos(w.v_eps), "utility.reward.v_eps: must be positive");
        check(w.ttcp_cap.is_none_or(pos), "utility.reward.ttcp_cap: must be positive or null");

        check(pos(self.constraints.d_safe), "constraints.d_safe: must be positive");
        check(self.constraints.substeps >= 1, "constraints.substeps: must be at least 1");

        let o = &self.solver;
        check(o.max_iterations >= 1, "solver.max_iterations: must be at least 1");
        check(pos(o.tolerance), "solver.tolerance: must be positive");
        check(nonneg(o.lambda), "solver.lambda: must be nonnegative");
        check(nonneg(o.mu_pen), "solver.mu_pen: must be nonnegative");
        check(o.rho > 0.0 && o.rho < 1.0, "solver.rho: must be in (0, 1)");
        check(o.c1 > 0.0 && o.c1 < 1.0, "solver.c1: must be in (0, 1)");
        check(pos(o.fd_step), "solver.fd_step: must be positive");
        check(o.penalty_growth >= 1.0, "solver.penalty_growth: must be at least 1");
        check(pos(o.feasibility_tol), "solver.feasibility_tol: must be positive");
        check(
            self.seed_grid.iter().all(|a| (u.a_min..=u.a_max).contains(a)),
            "seed_grid: entries must lie in [utility.a_min, utility.a_max]",
        );

        let pr = &self.preference;
        check(nonneg(pr.mu), "preference.mu: must be nonnegative");
        check(pos(pr.delta), "preference.delta: must be positive");
        check(nonneg(pr.step_cap), "preference.step_cap: must be nonnegative");
        check(
            nonneg(pr.alpha_min) && pr.alpha_min <= pr.alpha_max,
            "preference.alpha_min/alpha_max: need 0 <= alpha_min <= alpha_max",
        );
        check(
            nonneg(pr.beta_min) && pr.beta_min <= pr.beta_max,
            "preference.beta_min/beta_max: need 0 <= beta_min <= beta_max",
        );
        check(
            (pr.alpha_min..=pr.alpha_max).contains(&pr.init_alpha),
            "preference.init_alpha: must lie within the alpha bounds",
        );
        check(
            (pr.beta_min..=pr.beta_max).contains(&pr.init_beta),
            "preference.init_beta: must lie within the beta bounds",
        );
        check(pos(pr.reward_interval), "preference.reward_interval: must be positive");

        let h = &self.hdv;
        if let Err(e) = h.actions.check_bounds(u.a_min, u.a_max) {
            p.push(format!("hdv.actions: {e}"));
        }
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string());
            }
        };
        for (name, preset) in [
            ("aggressive", h.archetypes.aggressive),
            ("normal", h.archetypes.normal),
            ("conservative", h.archetypes.conservative),
        ] {
            check(
                (pr.alpha_min..=pr.alpha_max).contains(&preset.alpha)
                    && (pr.beta_min..=pr.beta_max).contains(&preset.beta),
                &format!("hdv.archetypes.{name}: must lie within the preference bounds"),
            );
        }
        check(
            h.archetypes.mix.iter().all(|m| nonneg(*m)) && h.archetypes.mix.iter().sum::<f64>() > 0.0,
            "hdv.archetypes.mix: entries must be nonnegative with a positive sum",
        );
        check(pos(h.desired_speed), "hdv.desired_speed: must be positive");
        check(nonneg(h.speed_gain), "hdv.speed_gain: must be nonnegative");
        check(nonneg(h.min_gap), "hdv.min_gap: must be nonnegative");
        check(pos(h.following_brake), "hdv.following_brake: must be positive");

        let c = &self.cav;
        check(nonneg(c.alpha) && nonneg(c.beta), "cav.alpha/beta: must be nonnegative");
        check(
            (u.a_min..=u.a_max).contains(&c.fallback_accel),
            "cav.fallback_accel: must lie in [utility.a_min, utility.a_max]",
        );
        check(pos(self.shapley.headway_threshold), "shapley.headway_threshold: must be positive");
        check(self.shapley.max_batch >= 1, "shapley.max_batch: must be at least 1");

        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(p))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads and validates a configuration file.
pub fn validate_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioConfig::from_json_str(&text)
}
