//! Self and group rewards, discounted individual utilities and the weighted
//! system potential over a planning horizon.

use crate::scenario::{Scenario, VehicleState};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w_speed: f64,
    pub w_dist: f64,
    pub w_comfort: f64,
    /// Speed floor used when computing time to the conflict point.
    pub v_eps: f64,
    /// Saturation of the TTCP gap (s). With a cap, a pair where either
    /// vehicle has passed the conflict point scores the cap; without one the
    /// gap is unbounded and such pairs score zero.
    pub ttcp_cap: Option<f64>,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w_speed: 2.0,
            w_dist: 1.0,
            w_comfort: 0.05,
            v_eps: 0.1,
            ttcp_cap: Some(8.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityParams {
    pub gamma: f64,
    pub horizon: usize,
    pub dt_plan: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub reward: RewardWeights,
}

impl Default for UtilityParams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            horizon: 8,
            dt_plan: 0.5,
            v_max: 12.0,
            a_min: -6.0,
            a_max: 3.0,
            reward: RewardWeights::default(),
        }
    }
}

/// Per-vehicle weights entering the potential: preference emphasis on the
/// self (`alpha`) and group (`beta`) rewards, and the Shapley weight `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub alpha: f64,
    pub beta: f64,
    pub phi: f64,
}

impl Preference {
    pub const fn new(alpha: f64, beta: f64, phi: f64) -> Self {
        Self { alpha, beta, phi }
    }
}

/// Accelerations for every participant over the horizon, one row per vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionProfile {
    rows: usize,
    horizon: usize,
    data: Vec<f64>,
}

impl ActionProfile {
    pub fn zeros(rows: usize, horizon: usize) -> Self {
        Self {
            rows,
            horizon,
            data: vec![0.0; rows * horizon],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let horizon = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == horizon), "ragged action profile");
        Self {
            rows: rows.len(),
            horizon,
            data: rows.concat(),
        }
    }

    pub fn from_flat(rows: usize, horizon: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * horizon);
        Self { rows, horizon, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn clamp_to(&mut self, lo: f64, hi: f64) {
        for a in &mut self.data {
            *a = a.clamp(lo, hi);
        }
    }
}

/// Kinematic prediction of one vehicle: entries `0..=T`, where index 0 is the
/// current state and `a[t]` is the acceleration applied over the interval
/// ending at step `t` (`a[0]` is the current acceleration).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTrajectory {
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    /// Acceleration actually realised over each interval after speed clamping.
    pub a_eff: Vec<f64>,
}

impl PredictedTrajectory {
    pub fn steps(&self) -> usize {
        self.s.len()
    }

    /// Remaining distance to a conflict point at arclength `s_cp`; negative
    /// once the vehicle has passed it.
    pub fn d_cp(&self, t: usize, s_cp: f64) -> f64 {
        s_cp - self.s[t]
    }

    /// Arclength `tau` seconds into interval `t` (between steps `t` and `t+1`).
    pub fn s_within(&self, t: usize, tau: f64) -> f64 {
        self.s[t] + self.v[t] * tau + 0.5 * self.a_eff[t + 1] * tau * tau
    }
}

/// Forward-integrates `accels` from `state` with step `dt`; speed is clamped
/// to `[0, v_max]` and the realised acceleration reduced accordingly.
pub fn rollout(state: &VehicleState, accels: &[f64], dt: f64, v_max: f64) -> PredictedTrajectory {
    let steps = accels.len() + 1;
    let mut traj = PredictedTrajectory {
        s: Vec::with_capacity(steps),
        v: Vec::with_capacity(steps),
        a: Vec::with_capacity(steps),
        a_eff: Vec::with_capacity(steps),
    };
    rollout_into(state, accels, dt, v_max, &mut traj);
    traj
}

pub(crate) fn rollout_into(
    state: &VehicleState,
    accels: &[f64],
    dt: f64,
    v_max: f64,
    traj: &mut PredictedTrajectory,
) {
    traj.s.clear();
    traj.v.clear();
    traj.a.clear();
    traj.a_eff.clear();
    let (mut s, mut v) = (state.s, state.v);
    traj.s.push(s);
    traj.v.push(v);
    traj.a.push(state.a);
    traj.a_eff.push(state.a);
    for &a in accels {
        let v_next = (v + a * dt).clamp(0.0, v_max);
        let a_eff = (v_next - v) / dt;
        s += v * dt + 0.5 * a_eff * dt * dt;
        v = v_next;
        traj.s.push(s);
        traj.v.push(v);
        traj.a.push(a);
        traj.a_eff.push(a_eff);
    }
}

/// Progress incentive minus remaining distance and comfort penalty.
pub fn self_reward(v: f64, d_o: f64, a: f64, w: &RewardWeights) -> f64 {
    w.w_speed * v - w.w_dist * d_o - w.w_comfort * a * a
}

/// Gap between the two vehicles' times to their shared conflict point.
pub fn group_reward(d_cp_i: f64, v_i: f64, d_cp_j: f64, v_j: f64, v_eps: f64) -> f64 {
    (d_cp_i / v_i.max(v_eps) - d_cp_j / v_j.max(v_eps)).abs()
}

/// Participants of one cooperative game together with their weights.
///
/// Vehicle indices are positions in `vehicles`; `prefs` is aligned with it.
#[derive(Clone, Debug)]
pub struct Game<'a> {
    pub scenario: &'a Scenario,
    pub vehicles: &'a [VehicleState],
    pub prefs: &'a [Preference],
    pub params: &'a UtilityParams,
    conflicts: Vec<Option<(f64, f64)>>,
    discounts: Vec<f64>,
}

impl<'a> Game<'a> {
    pub fn new(
        scenario: &'a Scenario,
        vehicles: &'a [VehicleState],
        prefs: &'a [Preference],
        params: &'a UtilityParams,
    ) -> Self {
        assert_eq!(vehicles.len(), prefs.len(), "one preference entry per vehicle");
        let n = vehicles.len();
        let mut conflicts = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    conflicts[i * n + j] = scenario.conflict_arclengths(vehicles[i].path, vehicles[j].path);
                }
            }
        }
        let discounts = (0..=params.horizon).map(|t| params.gamma.powi(t as i32)).collect();
        Self {
            scenario,
            vehicles,
            prefs,
            params,
            conflicts,
            discounts,
        }
    }

    /// Same participants with different weights.
    pub fn with_prefs<'b>(&self, prefs: &'b [Preference]) -> Game<'b>
    where
        'a: 'b,
    {
        Game {
            scenario: self.scenario,
            vehicles: self.vehicles,
            prefs,
            params: self.params,
            conflicts: self.conflicts.clone(),
            discounts: self.discounts.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    /// Conflict arclengths `(on i's path, on j's path)` if the pair conflicts.
    pub fn conflict(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        self.conflicts[i * self.len() + j]
    }

    pub fn rollout_vehicle(&self, i: usize, accels: &[f64]) -> PredictedTrajectory {
        rollout(&self.vehicles[i], accels, self.params.dt_plan, self.params.v_max)
    }

    pub(crate) fn rollout_vehicle_into(&self, i: usize, accels: &[f64], traj: &mut PredictedTrajectory) {
        rollout_into(&self.vehicles[i], accels, self.params.dt_plan, self.params.v_max, traj);
    }

    pub fn rollout_all(&self, profile: &ActionProfile) -> Vec<PredictedTrajectory> {
        assert_eq!(profile.rows(), self.len(), "profile must cover every participant");
        (0..self.len()).map(|i| self.rollout_vehicle(i, profile.row(i))).collect()
    }

    /// Discounted self-reward sum of vehicle `i` (unweighted).
    pub fn self_term(&self, i: usize, traj: &PredictedTrajectory) -> f64 {
        let w = &self.params.reward;
        let length = self.scenario.path(self.vehicles[i].path).total_length;
        (0..traj.steps())
            .map(|t| {
                let d_o = (length - traj.s[t]).max(0.0);
                self.discounts[t] * self_reward(traj.v[t], d_o, traj.a[t], w)
            })
            .sum()
    }

    /// Discounted group-reward sum of the pair (unweighted); zero for pairs
    /// without a conflict point. With a TTCP cap the distances are signed, so
    /// a vehicle beyond the conflict point keeps widening the gap until the
    /// cap is reached. Uncapped, steps where either vehicle has passed score
    /// zero.
    pub fn pair_term(&self, i: usize, j: usize, ti: &PredictedTrajectory, tj: &PredictedTrajectory) -> f64 {
        let Some((cp_i, cp_j)) = self.conflict(i, j) else {
            return 0.0;
        };
        let v_eps = self.params.reward.v_eps;
        let cap = self.params.reward.ttcp_cap;
        let mut total = 0.0;
        for t in 0..ti.steps() {
            let (di, dj) = (ti.d_cp(t, cp_i), tj.d_cp(t, cp_j));
            let r = match cap {
                Some(c) => {
                    let tti = di / ti.v[t].max(v_eps);
                    let ttj = dj / tj.v[t].max(v_eps);
                    (tti - ttj).abs().min(c)
                }
                None if di > 0.0 && dj > 0.0 => group_reward(di, ti.v[t], dj, tj.v[t], v_eps),
                None => 0.0,
            };
            total += self.discounts[t] * r;
        }
        total
    }

    /// Weight of the pair term in the system potential.
    pub fn pair_weight(&self, i: usize, j: usize) -> f64 {
        let (pi, pj) = (&self.prefs[i], &self.prefs[j]);
        0.5 * (pi.phi + pj.phi) * 0.5 * (pi.beta + pj.beta)
    }

    pub fn individual_utility_of(&self, i: usize, trajs: &[PredictedTrajectory]) -> f64 {
        let p = &self.prefs[i];
        let mut u = p.alpha * self.self_term(i, &trajs[i]);
        for j in 0..self.len() {
            if j != i {
                u += p.beta * self.pair_term(i, j, &trajs[i], &trajs[j]);
            }
        }
        u
    }

    pub fn potential_of(&self, trajs: &[PredictedTrajectory]) -> f64 {
        let n = self.len();
        let mut total = 0.0;
        for i in 0..n {
            let p = &self.prefs[i];
            total += p.phi * p.alpha * self.self_term(i, &trajs[i]);
        }
        for i in 0..n {
            for j in i + 1..n {
                if self.conflict(i, j).is_some() {
                    total += self.pair_weight(i, j) * self.pair_term(i, j, &trajs[i], &trajs[j]);
                }
            }
        }
        total
    }
}

/// Discounted preference-weighted utility of vehicle `i` under `profile`.
pub fn individual_utility(i: usize, profile: &ActionProfile, game: &Game<'_>) -> f64 {
    game.individual_utility_of(i, &game.rollout_all(profile))
}

/// Shapley- and preference-weighted system potential of `profile`.
pub fn system_potential(profile: &ActionProfile, game: &Game<'_>) -> f64 {
    game.potential_of(&game.rollout_all(profile))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{GeometryConfig, VehicleKind};

    fn vehicle(id: usize, path: usize, s: f64, v: f64) -> VehicleState {
        VehicleState {
            id,
            path,
            s,
            v,
            a: 0.0,
            kind: VehicleKind::Cav,
            length: 4.5,
            width: 2.0,
        }
    }

    #[test]
    fn rollout_constant_velocity() {
        let tr = rollout(&vehicle(0, 0, 0.0, 10.0), &[0.0; 8], 0.5, 12.0);
        for t in 0..=8 {
            assert!((tr.s[t] - 5.0 * t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_never_reverses() {
        let tr = rollout(&vehicle(0, 0, 0.0, 1.0), &[-4.0; 4], 0.5, 12.0);
        assert_eq!(tr.v[1], 0.0);
        assert!(tr.v[1..].iter().all(|&v| v == 0.0));
        // stops after exactly v^2 / (2 |a_eff|) = 0.25 m
        assert!((tr.s[1] - 0.25).abs() < 1e-12);
        assert!(tr.s[1..].iter().all(|&s| (s - 0.25).abs() < 1e-12));
    }

    #[test]
    fn rollout_matches_hand_iteration() {
        // independent naive loop of the recurrence
        let (mut s, mut v) = (3.0_f64, 6.0_f64);
        let mut expected = vec![(s, v)];
        for _ in 0..8 {
            let mut a = 2.0;
            if v + a * 0.5 > 12.0 {
                a = (12.0 - v) / 0.5;
            }
            s = s + v * 0.5 + 0.5 * a * 0.25;
            v += a * 0.5;
            expected.push((s, v));
        }
        let tr = rollout(&vehicle(0, 0, 3.0, 6.0), &[2.0; 8], 0.5, 12.0);
        for (t, &(s, v)) in expected.iter().enumerate() {
            assert!((tr.s[t] - s).abs() < 1e-12);
            assert!((tr.v[t] - v).abs() < 1e-12);
        }
        assert_eq!(tr.v[4], 10.0);
        assert_eq!(tr.v[8], 12.0);
    }

    #[test]
    fn reward_values() {
        let w = RewardWeights::default();
        assert_eq!(self_reward(0.0, 0.0, 0.0, &w), 0.0);
        assert!((self_reward(10.0, 50.0, 2.0, &w) - (-30.2)).abs() < 1e-12);
        let w2 = RewardWeights { w_speed: 4.0, ..w.clone() };
        assert!((self_reward(10.0, 50.0, 2.0, &w2) - self_reward(10.0, 50.0, 2.0, &w) - 20.0).abs() < 1e-12);

        assert!((group_reward(20.0, 10.0, 30.0, 10.0, 0.1) - 1.0).abs() < 1e-12);
        assert_eq!(group_reward(25.0, 7.0, 25.0, 7.0, 0.1), 0.0);
        assert!((group_reward(20.0, 0.0, 30.0, 10.0, 0.1) - 197.0).abs() < 1e-9);
    }

    #[test]
    fn geometric_discount_sum() {
        // a lone stationary vehicle at its destination with w_speed = 1 and
        // v = 1 earns exactly 1 per step
        let scenario = Scenario::four_arm(&GeometryConfig::default());
        let len = scenario.path(1).total_length;
        let params = UtilityParams {
            v_max: 1.0,
            reward: RewardWeights {
                w_speed: 1.0,
                w_dist: 0.0,
                w_comfort: 0.0,
                v_eps: 0.1,
                ttcp_cap: None,
            },
            ..UtilityParams::default()
        };
        let vehicles = [vehicle(0, 1, len, 1.0)];
        let prefs = [Preference::new(1.0, 1.0, 1.0)];
        let game = Game::new(&scenario, &vehicles, &prefs, &params);
        let u = individual_utility(0, &ActionProfile::zeros(1, 8), &game);
        let expected: f64 = (0..=8).map(|t| 0.9_f64.powi(t)).sum();
        assert!((u - expected).abs() < 1e-12);
        assert!((u - 6.125_795_1).abs() < 1e-7);

        let zero = [Preference::new(0.0, 0.0, 1.0)];
        let game = Game::new(&scenario, &vehicles, &zero, &params);
        assert_eq!(individual_utility(0, &ActionProfile::zeros(1, 8), &game), 0.0);
    }

    #[test]
    fn two_vehicle_exact_potential_expansion() {
        let scenario = Scenario::four_arm(&GeometryConfig::default());
        for cap in [None, Some(3.0)] {
            let mut params = UtilityParams::default();
            params.reward.ttcp_cap = cap;
            // south-left vs north-through cross
            let vehicles = [vehicle(0, 0, 30.0, 8.0), vehicle(1, 7, 25.0, 9.0)];
            let prefs = [Preference::new(1.0, 1.0, 1.0); 2];
            let game = Game::new(&scenario, &vehicles, &prefs, &params);
            let profile = ActionProfile::from_rows(&[vec![1.0; 8], vec![-1.0; 8]]);
            let tr = game.rollout_all(&profile);
            // hand expansion: sum over t of gamma^t (r_s1 + r_s2 + r_g12)
            let (cp0, cp1) = game.conflict(0, 1).unwrap();
            let mut expected = 0.0;
            for t in 0..=8 {
                let g = 0.9_f64.powi(t as i32);
                let w = &params.reward;
                let r1 = self_reward(tr[0].v[t], scenario.path(0).total_length - tr[0].s[t], tr[0].a[t], w);
                let r2 = self_reward(tr[1].v[t], scenario.path(7).total_length - tr[1].s[t], tr[1].a[t], w);
                let (d0, d1) = (cp0 - tr[0].s[t], cp1 - tr[1].s[t]);
                let rg = if d0 > 0.0 && d1 > 0.0 {
                    let raw = group_reward(d0, tr[0].v[t], d1, tr[1].v[t], 0.1);
                    cap.map_or(raw, |c: f64| raw.min(c))
                } else {
                    cap.unwrap_or(0.0)
                };
                expected += g * (r1 + r2 + rg);
            }
            let s = system_potential(&profile, &game);
            assert!((s - expected).abs() < 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn single_vehicle_potential_is_its_utility() {
        let scenario = Scenario::four_arm(&GeometryConfig::default());
        let params = UtilityParams::default();
        let vehicles = [vehicle(0, 4, 12.0, 7.0)];
        let prefs = [Preference::new(1.0, 37.0, 1.0)];
        let game = Game::new(&scenario, &vehicles, &prefs, &params);
        let profile = ActionProfile::from_rows(&[vec![0.5, 1.0, -1.0, 0.0, 2.0, 2.0, -3.0, 0.0]]);
        assert_eq!(system_potential(&profile, &game), individual_utility(0, &profile, &game));
    }
}
