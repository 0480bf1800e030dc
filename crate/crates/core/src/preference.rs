//! Online estimation of human drivers' preferences from the mismatch between
//! the action the cooperative solve predicted for them and what they did.

use crate::scenario::VehicleState;
use crate::solver::{solve, ConstraintConfig, GameProblem, Objective, PenaltyWeights, SolverOptions};
use crate::utility::{rollout, self_reward, ActionProfile, Game, Preference};
use log::debug;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub mu: f64,
    /// Perturbation used for the finite-difference sensitivities.
    pub delta: f64,
    /// Largest change of either estimate in one update.
    pub step_cap: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub init_alpha: f64,
    pub init_beta: f64,
    /// Interval (s) over which an action's one-step rewards are evaluated.
    pub reward_interval: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            delta: 0.05,
            step_cap: 0.25,
            alpha_min: 0.1,
            alpha_max: 5.0,
            beta_min: 0.1,
            beta_max: 50.0,
            init_alpha: 1.0,
            init_beta: 10.0,
            reward_interval: 0.5,
        }
    }
}

impl PreferenceConfig {
    pub fn clamp_alpha(&self, a: f64) -> f64 {
        a.clamp(self.alpha_min, self.alpha_max)
    }

    pub fn clamp_beta(&self, b: f64) -> f64 {
        b.clamp(self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceUpdateRecord {
    pub vehicle: usize,
    pub step: usize,
    pub alpha_before: f64,
    pub alpha_after: f64,
    pub beta_before: f64,
    pub beta_after: f64,
    pub gap_self: f64,
    pub gap_group: f64,
    pub grad_alpha: f64,
    pub grad_beta: f64,
    pub skipped: bool,
}

/// A solved plan together with everything needed to re-solve parts of it.
#[derive(Clone, Debug)]
pub struct SolveSnapshot {
    pub ids: Vec<usize>,
    pub states: Vec<VehicleState>,
    pub prefs: Vec<Preference>,
    pub bounds: Vec<(f64, f64)>,
    pub profile: ActionProfile,
}

impl SolveSnapshot {
    pub fn row_of(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

/// The vehicle's acceleration row from the most recent solve, if it took part.
pub fn estimated_action_for(id: usize, last: Option<&SolveSnapshot>) -> Option<Vec<f64>> {
    let snap = last?;
    snap.row_of(id).map(|r| snap.profile.row(r).to_vec())
}

/// Self reward and summed group reward of vehicle `k` holding `a` for one
/// interval from the snapshot state, others holding their current accelerations.
pub fn one_step_rewards(game: &Game<'_>, k: usize, a: f64, interval: f64) -> (f64, f64) {
    let p = game.params;
    let step = |i: usize, a: f64| rollout(&game.vehicles[i], &[a], interval, p.v_max);
    let own = step(k, a);
    let length = game.scenario.path(game.vehicles[k].path).total_length;
    let r_s = self_reward(own.v[1], (length - own.s[1]).max(0.0), a, &p.reward);
    let mut r_g = 0.0;
    for j in 0..game.len() {
        if j == k || game.conflict(k, j).is_none() {
            continue;
        }
        let other = step(j, game.vehicles[j].a);
        // one-step pair reward at the end of the interval
        r_g += pair_reward_at(game, k, j, &own, &other, 1);
    }
    (r_s, r_g)
}

fn pair_reward_at(
    game: &Game<'_>,
    i: usize,
    j: usize,
    ti: &crate::utility::PredictedTrajectory,
    tj: &crate::utility::PredictedTrajectory,
    t: usize,
) -> f64 {
    let Some((cp_i, cp_j)) = game.conflict(i, j) else {
        return 0.0;
    };
    let w = &game.params.reward;
    let (di, dj) = (ti.d_cp(t, cp_i), tj.d_cp(t, cp_j));
    if di > 0.0 && dj > 0.0 {
        let gap = crate::utility::group_reward(di, ti.v[t], dj, tj.v[t], w.v_eps);
        w.ttcp_cap.map_or(gap, |c| gap.min(c))
    } else {
        w.ttcp_cap.unwrap_or(0.0)
    }
}

/// Everything `bp_update` needs about the previous solve.
pub struct BpContext<'a> {
    pub game: &'a Game<'a>,
    pub snapshot: &'a SolveSnapshot,
    /// Row of the vehicle being estimated.
    pub row: usize,
    pub constraints: &'a ConstraintConfig,
    pub solver: &'a SolverOptions,
    /// Constant accelerations tried before the continuous re-solve.
    pub seed_grid: &'a [f64],
}

/// First estimated action for a vehicle after re-solving only its row with
/// preferences `pref`, others frozen at the snapshot plan.
pub fn resolve_first_action(ctx: &BpContext<'_>, pref: Preference) -> Option<f64> {
    let mut prefs = ctx.snapshot.prefs.clone();
    prefs[ctx.row] = pref;
    let game = ctx.game.with_prefs(&prefs);
    let problem = GameProblem::new(
        &game,
        ctx.snapshot.profile.clone(),
        vec![ctx.row],
        &ctx.snapshot.bounds,
        ctx.constraints.clone(),
    );
    let warm = ctx.snapshot.profile.row(ctx.row).to_vec();
    let pen = PenaltyWeights {
        lambda: ctx.solver.lambda,
        mu: ctx.solver.mu_pen,
    };
    // seeding lets the re-solve switch between yielding and passing
    let seed = problem.improvement_path(&warm, ctx.seed_grid, 1, &pen);
    let x0 = if problem.merit(&seed, &pen) < problem.merit(&warm, &pen) { seed } else { warm };
    let result = solve(&problem, &x0, ctx.solver);
    let a = result.x[0];
    a.is_finite().then_some(a)
}

/// One gradient step on the squared reward gaps between the estimated and
/// observed action. Returns the updated `(alpha, beta)` and a record.
pub fn bp_update(
    current: (f64, f64),
    estimated_action: &[f64],
    observed_action: f64,
    ctx: &BpContext<'_>,
    cfg: &PreferenceConfig,
    step: usize,
) -> ((f64, f64), PreferenceUpdateRecord) {
    let (alpha, beta) = current;
    let vehicle = ctx.snapshot.ids[ctx.row];
    let k = ctx.row;
    let tau = cfg.reward_interval;
    let (obs_s, obs_g) = one_step_rewards(ctx.game, k, observed_action, tau);
    let (est_s, est_g) = one_step_rewards(ctx.game, k, estimated_action[0], tau);
    let gap_s = est_s - obs_s;
    let gap_g = est_g - obs_g;
    let mut record = PreferenceUpdateRecord {
        vehicle,
        step,
        alpha_before: alpha,
        alpha_after: alpha,
        beta_before: beta,
        beta_after: beta,
        gap_self: gap_s,
        gap_group: gap_g,
        grad_alpha: 0.0,
        grad_beta: 0.0,
        skipped: false,
    };
    if gap_s == 0.0 && gap_g == 0.0 {
        return ((alpha, beta), record);
    }

    let phi = ctx.snapshot.prefs[k].phi;
    let d = cfg.delta;
    let probe = |p: Preference| resolve_first_action(ctx, p).map(|a| one_step_rewards(ctx.game, k, a, tau));
    let perturbed = (|| {
        let a_up = probe(Preference::new(alpha + d, beta, phi))?;
        let a_dn = probe(Preference::new((alpha - d).max(0.0), beta, phi))?;
        let b_up = probe(Preference::new(alpha, beta + d, phi))?;
        let b_dn = probe(Preference::new(alpha, (beta - d).max(0.0), phi))?;
        Some((a_up, a_dn, b_up, b_dn))
    })();
    let Some((a_up, a_dn, b_up, b_dn)) = perturbed else {
        debug!("vehicle {vehicle}: perturbed re-solve failed, preference update skipped");
        record.skipped = true;
        return ((alpha, beta), record);
    };
    let a_span = alpha + d - (alpha - d).max(0.0);
    let b_span = beta + d - (beta - d).max(0.0);
    // sensitivities of the estimated rewards; observed rewards do not depend on the estimate
    let ds_dalpha = (a_up.0 - a_dn.0) / a_span;
    let dg_dbeta = (b_up.1 - b_dn.1) / b_span;
    let grad_alpha = gap_s * ds_dalpha;
    let grad_beta = gap_g * dg_dbeta;
    let cap = cfg.step_cap;
    let alpha_new = cfg.clamp_alpha(alpha - (cfg.mu * grad_alpha).clamp(-cap, cap));
    let beta_new = cfg.clamp_beta(beta - (cfg.mu * grad_beta).clamp(-cap, cap));
    record.grad_alpha = grad_alpha;
    record.grad_beta = grad_beta;
    record.alpha_after = alpha_new;
    record.beta_after = beta_new;
    ((alpha_new, beta_new), record)
}
