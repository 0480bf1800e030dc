//! Equilibrium search: maximizes the weighted potential under collision and
//! dynamics constraints with a penalized quasi-Newton method (quadratic model
//! of the merit, backtracking line search, BFGS Hessian updates).
//!
//! Internally everything is a minimization of the merit
//! `-S(x) + lambda * sum max(c, 0)^2 + mu * sum max(d, 0)^2`.

use std::borrow::Cow;

use crate::scenario::Point2;
use crate::utility::{ActionProfile, Game, PredictedTrajectory};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stationarity tolerance on the projected merit gradient (infinity norm).
    pub tolerance: f64,
    pub lambda: f64,
    pub mu_pen: f64,
    pub rho: f64,
    pub c1: f64,
    pub fd_step: f64,
    pub max_backtracks: usize,
    /// Factor applied to both penalty weights when a stationary point is
    /// still infeasible.
    pub penalty_growth: f64,
    pub max_penalty: f64,
    pub feasibility_tol: f64,
    #[serde(skip)]
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-3,
            lambda: 100.0,
            mu_pen: 100.0,
            rho: 0.5,
            c1: 1e-4,
            fd_step: 1e-4,
            max_backtracks: 30,
            penalty_growth: 10.0,
            max_penalty: 1e6,
            feasibility_tol: 1e-4,
            record_trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub lambda: f64,
    pub mu: f64,
}

fn squared_violation(values: &[f64]) -> f64 {
    values.iter().map(|&c| if c > 0.0 { c * c } else { 0.0 }).sum()
}

fn max_positive(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

/// A maximization problem with inequality constraints `c(x) <= 0` (collision)
/// and `d(x) <= 0` (dynamics) and box bounds on the variables.
pub trait Objective {
    fn dim(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// The potential to maximize.
    fn potential(&self, x: &[f64]) -> f64;
    fn constraints(&self, x: &[f64], collision: &mut Vec<f64>, dynamics: &mut Vec<f64>);

    fn merit(&self, x: &[f64], w: &PenaltyWeights) -> f64 {
        let (mut c, mut d) = (Vec::new(), Vec::new());
        self.constraints(x, &mut c, &mut d);
        -self.potential(x) + w.lambda * squared_violation(&c) + w.mu * squared_violation(&d)
    }

    /// Central finite-difference gradient of the merit.
    fn merit_gradient(&self, x: &[f64], w: &PenaltyWeights, h: f64, grad: &mut [f64]) {
        let mut probe = x.to_vec();
        for k in 0..x.len() {
            probe[k] = x[k] + h;
            let up = self.merit(&probe, w);
            probe[k] = x[k] - h;
            let down = self.merit(&probe, w);
            probe[k] = x[k];
            grad[k] = (up - down) / (2.0 * h);
        }
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        let (mut c, mut d) = (Vec::new(), Vec::new());
        self.constraints(x, &mut c, &mut d);
        max_positive(&c).max(max_positive(&d))
    }
}

type PotentialFn = Box<dyn Fn(&[f64]) -> f64 + Sync>;
type ConstraintFn = Box<dyn Fn(&[f64], &mut Vec<f64>) + Sync>;
type GradientFn = Box<dyn Fn(&[f64], &mut [f64]) + Sync>;

/// Closure-backed problem, for benchmarks and small analytic cases.
pub struct FnProblem {
    lower: Vec<f64>,
    upper: Vec<f64>,
    potential: PotentialFn,
    collision: Option<ConstraintFn>,
    dynamics: Option<ConstraintFn>,
    potential_gradient: Option<GradientFn>,
}

impl FnProblem {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, potential: impl Fn(&[f64]) -> f64 + Sync + 'static) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self {
            lower,
            upper,
            potential: Box::new(potential),
            collision: None,
            dynamics: None,
            potential_gradient: None,
        }
    }

    pub fn unbounded(dim: usize, potential: impl Fn(&[f64]) -> f64 + Sync + 'static) -> Self {
        Self::new(vec![f64::NEG_INFINITY; dim], vec![f64::INFINITY; dim], potential)
    }

    pub fn with_collision(mut self, f: impl Fn(&[f64], &mut Vec<f64>) + Sync + 'static) -> Self {
        self.collision = Some(Box::new(f));
        self
    }

    pub fn with_dynamics(mut self, f: impl Fn(&[f64], &mut Vec<f64>) + Sync + 'static) -> Self {
        self.dynamics = Some(Box::new(f));
        self
    }

    /// Analytic gradient of the potential (replaces finite differences for
    /// the objective part; penalties are still differenced).
    pub fn with_potential_gradient(mut self, f: impl Fn(&[f64], &mut [f64]) + Sync + 'static) -> Self {
        self.potential_gradient = Some(Box::new(f));
        self
    }
}

impl Objective for FnProblem {
    fn dim(&self) -> usize {
        self.lower.len()
    }
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }
    fn potential(&self, x: &[f64]) -> f64 {
        (self.potential)(x)
    }
    fn constraints(&self, x: &[f64], collision: &mut Vec<f64>, dynamics: &mut Vec<f64>) {
        collision.clear();
        dynamics.clear();
        if let Some(f) = &self.collision {
            f(x, collision);
        }
        if let Some(f) = &self.dynamics {
            f(x, dynamics);
        }
    }
    fn merit_gradient(&self, x: &[f64], w: &PenaltyWeights, h: f64, grad: &mut [f64]) {
        let Some(pg) = &self.potential_gradient else {
            // default body, inlined because trait defaults cannot be called once overridden
            let mut probe = x.to_vec();
            for k in 0..x.len() {
                probe[k] = x[k] + h;
                let up = self.merit(&probe, w);
                probe[k] = x[k] - h;
                let down = self.merit(&probe, w);
                probe[k] = x[k];
                grad[k] = (up - down) / (2.0 * h);
            }
            return;
        };
        pg(x, grad);
        let (mut c, mut d) = (Vec::new(), Vec::new());
        let mut probe = x.to_vec();
        let penalty = |p: &[f64], c: &mut Vec<f64>, d: &mut Vec<f64>| {
            self.constraints(p, c, d);
            w.lambda * squared_violation(c) + w.mu * squared_violation(d)
        };
        let has_constraints = self.collision.is_some() || self.dynamics.is_some();
        for k in 0..x.len() {
            grad[k] = -grad[k];
            if has_constraints {
                probe[k] = x[k] + h;
                let up = penalty(&probe, &mut c, &mut d);
                probe[k] = x[k] - h;
                let down = penalty(&probe, &mut c, &mut d);
                probe[k] = x[k];
                grad[k] += (up - down) / (2.0 * h);
            }
        }
    }
}

/// Quadratic model of the penalized merit at `x` along `dx`, with the
/// penalties evaluated at the trial point (only violations contribute).
pub fn lagrangian<P: Objective + ?Sized>(
    x: &[f64],
    dx: &[f64],
    problem: &P,
    hessian: &DMatrix<f64>,
    gradient: &[f64],
    w: &PenaltyWeights,
) -> f64 {
    let d = DVector::from_column_slice(dx);
    let quad = 0.5 * d.dot(&(hessian * &d));
    let lin: f64 = gradient.iter().zip(dx).map(|(g, s)| g * s).sum();
    let trial: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + b).collect();
    let (mut c, mut dyn_rows) = (Vec::new(), Vec::new());
    problem.constraints(&trial, &mut c, &mut dyn_rows);
    quad + lin + w.lambda * squared_violation(&c) + w.mu * squared_violation(&dyn_rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub value: f64,
    pub stalled: bool,
    /// Set when the supplied direction was not a descent direction and
    /// steepest descent was used instead.
    pub reset_to_steepest: bool,
}

/// Backtracking line search for the Armijo condition
/// `f(x + l dx) <= f(x) + c1 * l * grad . dx` over `l = 1, rho, rho^2, ...`.
pub fn line_search(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    dx: &[f64],
    grad: &[f64],
    opts: &SolverOptions,
) -> LineSearchOutcome {
    let f0 = f(x);
    let slope: f64 = grad.iter().zip(dx).map(|(g, d)| g * d).sum();
    let mut reset = false;
    let steepest: Vec<f64>;
    let (dir, slope) = if slope < 0.0 {
        (dx, slope)
    } else {
        reset = true;
        steepest = grad.iter().map(|g| -g).collect();
        let s = -grad.iter().map(|g| g * g).sum::<f64>();
        (steepest.as_slice(), s)
    };
    let mut l = 1.0;
    let mut trial = vec![0.0; x.len()];
    for _ in 0..=opts.max_backtracks {
        for k in 0..x.len() {
            trial[k] = x[k] + l * dir[k];
        }
        let value = f(&trial);
        if value <= f0 + opts.c1 * l * slope {
            return LineSearchOutcome {
                step: l,
                value,
                stalled: false,
                reset_to_steepest: reset,
            };
        }
        l *= opts.rho;
    }
    LineSearchOutcome {
        step: 0.0,
        value: f0,
        stalled: true,
        reset_to_steepest: reset,
    }
}

/// BFGS update of the Hessian approximation; skipped when the curvature
/// condition `y.s > 1e-10` fails.
pub fn bfgs_update(h: &DMatrix<f64>, s: &[f64], y: &[f64]) -> DMatrix<f64> {
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let ys = y.dot(&s);
    if ys <= 1e-10 {
        return h.clone();
    }
    let hs = h * &s;
    let shs = s.dot(&hs);
    if shs <= 0.0 {
        return h.clone();
    }
    h + (&y * y.transpose()) / ys - (&hs * hs.transpose()) / shs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    LineSearchStall,
}

/// One accepted iterate, kept for certificate checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub merit_before: f64,
    pub merit_after: f64,
    pub step: f64,
    /// `grad . (x_next - x)`, the directional slope used by the Armijo test.
    pub slope: f64,
    pub penalty: PenaltyWeights,
    pub model_value: f64,
}

impl StepRecord {
    pub fn satisfies_armijo(&self, c1: f64) -> bool {
        self.merit_after <= self.merit_before + c1 * self.slope
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub potential: f64,
    pub merit: f64,
    pub residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub max_violation: f64,
    pub penalty: PenaltyWeights,
    pub trace: Vec<StepRecord>,
}

impl SolveResult {
    pub fn infeasible(&self, opts: &SolverOptions) -> bool {
        self.max_violation > opts.feasibility_tol.max(1e-3)
    }
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for k in 0..x.len() {
        x[k] = x[k].clamp(lo[k], hi[k]);
    }
}

fn bound_active(x: f64, g: f64, lo: f64, hi: f64) -> bool {
    (x <= lo && g > 0.0) || (x >= hi && g < 0.0)
}

fn projected_residual(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..x.len())
        .filter(|&k| !bound_active(x[k], g[k], lo[k], hi[k]))
        .map(|k| g[k].abs())
        .fold(0.0, f64::max)
}

/// Quasi-Newton direction on the free variables; bound-active ones stay put.
fn direction(h: &DMatrix<f64>, x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Option<Vec<f64>> {
    let free: Vec<usize> = (0..x.len()).filter(|&k| !bound_active(x[k], g[k], lo[k], hi[k])).collect();
    let mut d = vec![0.0; x.len()];
    if free.is_empty() {
        return Some(d);
    }
    let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
    let gf = DVector::from_iterator(free.len(), free.iter().map(|&k| -g[k]));
    let step = hf.cholesky()?.solve(&gf);
    for (a, &k) in free.iter().enumerate() {
        d[k] = step[a];
    }
    Some(d)
}

/// Runs the penalized quasi-Newton iteration from `x0`.
pub fn solve<P: Objective + ?Sized>(problem: &P, x0: &[f64], opts: &SolverOptions) -> SolveResult {
    let n = problem.dim();
    assert_eq!(x0.len(), n, "start point has wrong dimension");
    let (lo, hi) = (problem.lower(), problem.upper());
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);

    let mut pen = PenaltyWeights {
        lambda: opts.lambda,
        mu: opts.mu_pen,
    };
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut f = problem.merit(&x, &pen);
    let mut g = vec![0.0; n];
    problem.merit_gradient(&x, &pen, opts.fd_step, &mut g);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut status = SolveStatus::MaxIter;
    let mut retried = false;
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    loop {
        let residual = projected_residual(&x, &g, lo, hi);
        if residual <= opts.tolerance {
            let viol = problem.max_violation(&x);
            if viol <= opts.feasibility_tol || pen.lambda >= opts.max_penalty {
                status = SolveStatus::Converged;
                break;
            }
            pen.lambda *= opts.penalty_growth;
            pen.mu *= opts.penalty_growth;
            f = problem.merit(&x, &pen);
            problem.merit_gradient(&x, &pen, opts.fd_step, &mut g);
            h = DMatrix::identity(n, n);
            scaled = false;
            continue;
        }
        if iterations >= opts.max_iterations {
            break;
        }

        let mut d = direction(&h, &x, &g, lo, hi).unwrap_or_else(|| {
            h = DMatrix::identity(n, n);
            scaled = false;
            (0..n).map(|k| if bound_active(x[k], g[k], lo[k], hi[k]) { 0.0 } else { -g[k] }).collect()
        });
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            for k in 0..n {
                d[k] = if bound_active(x[k], g[k], lo[k], hi[k]) { 0.0 } else { -g[k] };
            }
        }

        // projected backtracking: Armijo on the actual displacement
        let mut l = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            for k in 0..n {
                trial[k] = x[k] + l * d[k];
            }
            project(&mut trial, lo, hi);
            let moved: f64 = (0..n).map(|k| g[k] * (trial[k] - x[k])).sum();
            if moved < 0.0 {
                let value = problem.merit(&trial, &pen);
                if value <= f + opts.c1 * moved {
                    accepted = Some((value, moved));
                    break;
                }
            }
            l *= opts.rho;
        }

        let Some((f_new, moved)) = accepted else {
            if retried {
                status = SolveStatus::LineSearchStall;
                break;
            }
            // reset curvature information and retry once
            retried = true;
            h = DMatrix::identity(n, n);
            scaled = false;
            continue;
        };
        retried = false;

        problem.merit_gradient(&trial, &pen, opts.fd_step, &mut g_new);
        let s: Vec<f64> = (0..n).map(|k| trial[k] - x[k]).collect();
        let y: Vec<f64> = (0..n).map(|k| g_new[k] - g[k]).collect();
        let ys: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if !scaled && ys > 1e-10 {
            let yy: f64 = y.iter().map(|v| v * v).sum();
            h = DMatrix::identity(n, n) * (yy / ys);
            scaled = true;
        }
        let record = StepRecord {
            iteration: iterations,
            merit_before: f,
            merit_after: f_new,
            step: l,
            slope: moved,
            penalty: pen,
            model_value: if opts.record_trace {
                lagrangian(&x, &s, problem, &h, &g, &pen) - 0.0
            } else {
                f64::NAN
            },
        };
        debug_assert!(record.satisfies_armijo(opts.c1), "accepted step without sufficient decrease");
        if opts.record_trace {
            trace.push(record);
        }
        h = bfgs_update(&h, &s, &y);
        x.copy_from_slice(&trial);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        iterations += 1;
    }

    let residual = projected_residual(&x, &g, lo, hi);
    SolveResult {
        potential: problem.potential(&x),
        merit: f,
        residual,
        iterations,
        status,
        max_violation: problem.max_violation(&x),
        penalty: pen,
        x,
        trace,
    }
}

/// Settings of the driving game's constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Minimum centre-to-centre distance between vehicles on related paths.
    pub d_safe: f64,
    /// Samples per planning interval at which distances are checked.
    pub substeps: usize,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            d_safe: 5.0,
            substeps: 5,
        }
    }
}

#[derive(Clone, Debug)]
struct Track {
    traj: PredictedTrajectory,
    /// `horizon * substeps` sampled arclengths and positions.
    arclengths: Vec<f64>,
    points: Vec<Point2>,
}

/// The driving game as an optimization problem over the acceleration rows
/// of `active` vehicles; the remaining rows stay fixed at `base`.
pub struct GameProblem<'g> {
    pub game: &'g Game<'g>,
    base: ActionProfile,
    active: Vec<usize>,
    row_of: Vec<Option<usize>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    constrained: Vec<(usize, usize)>,
    conflicting: Vec<(usize, usize)>,
    neighbours: Vec<Vec<usize>>,
    frozen: Vec<Option<Track>>,
    cfg: ConstraintConfig,
}

impl<'g> GameProblem<'g> {
    /// `bounds[i]` is the acceleration range of vehicle `i`.
    pub fn new(
        game: &'g Game<'g>,
        base: ActionProfile,
        active: Vec<usize>,
        bounds: &[(f64, f64)],
        cfg: ConstraintConfig,
    ) -> Self {
        let n = game.len();
        let horizon = game.params.horizon;
        assert_eq!(base.rows(), n);
        assert_eq!(base.horizon(), horizon);
        assert_eq!(bounds.len(), n);
        let mut row_of = vec![None; n];
        for (r, &i) in active.iter().enumerate() {
            row_of[i] = Some(r);
        }
        let mut lower = Vec::with_capacity(active.len() * horizon);
        let mut upper = Vec::with_capacity(active.len() * horizon);
        for &i in &active {
            lower.extend(std::iter::repeat_n(bounds[i].0, horizon));
            upper.extend(std::iter::repeat_n(bounds[i].1, horizon));
        }
        let mut constrained = Vec::new();
        let mut conflicting = Vec::new();
        let mut neighbours = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                let conflict = game.conflict(i, j).is_some();
                let related = conflict || game.scenario.shares_lane(game.vehicles[i].path, game.vehicles[j].path);
                if conflict {
                    conflicting.push((i, j));
                }
                if related {
                    constrained.push((i, j));
                    neighbours[i].push(j);
                    neighbours[j].push(i);
                }
            }
        }
        let mut problem = Self {
            game,
            base,
            active,
            row_of,
            lower,
            upper,
            constrained,
            conflicting,
            neighbours,
            frozen: Vec::new(),
            cfg,
        };
        problem.frozen = (0..n)
            .map(|i| problem.row_of[i].is_none().then(|| problem.track(i, problem.base.row(i))))
            .collect();
        problem
    }

    /// All vehicles free, each within `[a_min, a_max]` of the game parameters.
    pub fn full(game: &'g Game<'g>, cfg: ConstraintConfig) -> Self {
        let n = game.len();
        let bounds = vec![(game.params.a_min, game.params.a_max); n];
        Self::new(game, ActionProfile::zeros(n, game.params.horizon), (0..n).collect(), &bounds, cfg)
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Collision rows that involve at least one active vehicle.
    pub fn collision_rows(&self) -> usize {
        let rows = self.constrained.iter().filter(|&&(i, j)| self.row_of[i].is_some() || self.row_of[j].is_some());
        rows.count() * self.game.params.horizon
    }

    pub fn dynamics_rows(&self) -> usize {
        2 * self.active.len() * self.game.params.horizon
    }

    /// Flattened decision vector of `profile` restricted to the active rows.
    pub fn pack(&self, profile: &ActionProfile) -> Vec<f64> {
        self.active.iter().flat_map(|&i| profile.row(i).iter().copied()).collect()
    }

    /// Full profile with the active rows taken from `x`.
    pub fn unpack(&self, x: &[f64]) -> ActionProfile {
        let mut p = self.base.clone();
        let horizon = self.game.params.horizon;
        for (r, &i) in self.active.iter().enumerate() {
            p.row_mut(i).copy_from_slice(&x[r * horizon..(r + 1) * horizon]);
        }
        p
    }

    fn track(&self, i: usize, accels: &[f64]) -> Track {
        let traj = self.game.rollout_vehicle(i, accels);
        let mut t = Track {
            traj,
            arclengths: Vec::new(),
            points: Vec::new(),
        };
        self.fill_points(i, &mut t, 0);
        t
    }

    /// Recomputes the sampled positions of planning steps `from..`.
    fn fill_points(&self, i: usize, t: &mut Track, from: usize) {
        let path = self.game.scenario.path(self.game.vehicles[i].path);
        let k = self.cfg.substeps.max(1);
        let dt = self.game.params.dt_plan;
        t.points.truncate(from * k);
        t.arclengths.truncate(from * k);
        for step in from..self.game.params.horizon {
            for sub in 1..=k {
                let tau = dt * sub as f64 / k as f64;
                let s = t.traj.s_within(step, tau);
                t.arclengths.push(s);
                t.points.push(path.locate(s));
            }
        }
    }

    fn tracks(&self, x: &[f64]) -> Vec<Cow<'_, Track>> {
        let horizon = self.game.params.horizon;
        (0..self.game.len())
            .map(|i| match (&self.frozen[i], self.row_of[i]) {
                (Some(t), _) => Cow::Borrowed(t),
                (None, Some(r)) => Cow::Owned(self.track(i, &x[r * horizon..(r + 1) * horizon])),
                (None, None) => unreachable!(),
            })
            .collect()
    }

    /// One row per planning step: the largest shortfall of the centre
    /// distance below `d_safe` over the substeps. The required distance is
    /// scaled by how far both vehicles are inside the region where their
    /// paths come close, so rows stay continuous as vehicles enter it.
    fn pair_rows(&self, i: usize, j: usize, a: &Track, b: &Track, from: usize, out: &mut impl FnMut(f64)) {
        let k = self.cfg.substeps.max(1);
        let (pi, pj) = (self.game.vehicles[i].path, self.game.vehicles[j].path);
        let sc = self.game.scenario;
        let safe2 = self.cfg.d_safe * self.cfg.d_safe;
        for step in from..self.game.params.horizon {
            let mut worst = f64::NEG_INFINITY;
            // closest squared distance over substeps outside the region
            let mut far2 = f64::INFINITY;
            for sub in 0..k {
                let idx = step * k + sub;
                let (p, q) = (a.points[idx], b.points[idx]);
                let d2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
                // beyond d_safe the row is negative for any weight
                if d2 >= safe2 {
                    far2 = far2.min(d2);
                    continue;
                }
                let w = sc.interaction_weight(pi, a.arclengths[idx], pj, b.arclengths[idx]);
                if w > 0.0 {
                    worst = worst.max(w * self.cfg.d_safe - d2.sqrt());
                } else {
                    far2 = far2.min(d2);
                }
            }
            out(worst.max(-far2.sqrt()));
        }
    }

    fn dynamics_of(&self, t: &Track, from: usize, out: &mut impl FnMut(f64)) {
        let p = self.game.params;
        for step in from..p.horizon {
            let v_cmd = t.traj.v[step] + t.traj.a[step + 1] * p.dt_plan;
            out(-v_cmd);
            out(v_cmd - p.v_max);
        }
    }

    fn potential_of_tracks(&self, tracks: &[Cow<'_, Track>]) -> f64 {
        let g = self.game;
        let mut total = 0.0;
        for (i, t) in tracks.iter().enumerate() {
            total += g.prefs[i].phi * g.prefs[i].alpha * g.self_term(i, &t.traj);
        }
        for &(i, j) in &self.conflicting {
            total += g.pair_weight(i, j) * g.pair_term(i, j, &tracks[i].traj, &tracks[j].traj);
        }
        total
    }

    /// Every merit term that involves vehicle `i`, given the others' tracks.
    /// Penalty rows of planning steps before `from` are left out.
    fn local_merit(&self, i: usize, mine: &Track, tracks: &[Cow<'_, Track>], w: &PenaltyWeights, from: usize) -> f64 {
        let g = self.game;
        let mut value = -g.prefs[i].phi * g.prefs[i].alpha * g.self_term(i, &mine.traj);
        let mut collision = 0.0;
        for &j in &self.neighbours[i] {
            if g.conflict(i, j).is_some() {
                value -= g.pair_weight(i, j) * g.pair_term(i, j, &mine.traj, &tracks[j].traj);
            }
            self.pair_rows(i, j, mine, &tracks[j], from, &mut |c| {
                if c > 0.0 {
                    collision += c * c;
                }
            });
        }
        let mut dynamics = 0.0;
        self.dynamics_of(mine, from, &mut |d| {
            if d > 0.0 {
                dynamics += d * d;
            }
        });
        value + w.lambda * collision + w.mu * dynamics
    }

    /// Solver objective of a full profile (potential minus penalties, up to
    /// a constant when some rows are frozen).
    pub fn objective_of(&self, profile: &ActionProfile, w: &PenaltyWeights) -> f64 {
        -self.merit(&self.pack(profile), w)
    }

    /// Discrete improvement path: repeatedly lets each active vehicle switch
    /// to the best constant acceleration among `candidates` while the merit
    /// strictly improves. Terminates at an equilibrium of the discretised game.
    pub fn improvement_path(&self, x0: &[f64], candidates: &[f64], max_sweeps: usize, w: &PenaltyWeights) -> Vec<f64> {
        let horizon = self.game.params.horizon;
        let mut x = x0.to_vec();
        project(&mut x, &self.lower, &self.upper);
        let mut tracks = self.tracks(&x);
        let mut row = vec![0.0; horizon];
        for _ in 0..max_sweeps {
            let mut changed = false;
            for (r, &i) in self.active.iter().enumerate() {
                let current = self.local_merit(i, &tracks[i], &tracks, w, 0);
                let mut best: Option<(f64, f64)> = None;
                for &c in candidates {
                    let c = c.clamp(self.lower[r * horizon], self.upper[r * horizon]);
                    row.fill(c);
                    let t = self.track(i, &row);
                    let m = self.local_merit(i, &t, &tracks, w, 0);
                    if m < current - 1e-9 * current.abs().max(1.0) && best.is_none_or(|(bm, _)| m < bm) {
                        best = Some((m, c));
                    }
                }
                if let Some((_, c)) = best {
                    x[r * horizon..(r + 1) * horizon].fill(c);
                    row.fill(c);
                    tracks[i] = Cow::Owned(self.track(i, &row));
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        x
    }
}

impl Objective for GameProblem<'_> {
    fn dim(&self) -> usize {
        self.lower.len()
    }
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn potential(&self, x: &[f64]) -> f64 {
        self.potential_of_tracks(&self.tracks(x))
    }

    fn constraints(&self, x: &[f64], collision: &mut Vec<f64>, dynamics: &mut Vec<f64>) {
        collision.clear();
        dynamics.clear();
        let tracks = self.tracks(x);
        for &(i, j) in &self.constrained {
            if self.row_of[i].is_some() || self.row_of[j].is_some() {
                self.pair_rows(i, j, &tracks[i], &tracks[j], 0, &mut |c| collision.push(c));
            }
        }
        for &i in &self.active {
            self.dynamics_of(&tracks[i], 0, &mut |d| dynamics.push(d));
        }
    }

    /// Penalized objective up to terms that involve no active vehicle (those
    /// are constant in `x`).
    fn merit(&self, x: &[f64], w: &PenaltyWeights) -> f64 {
        let g = self.game;
        let tracks = self.tracks(x);
        let is_active = |i: usize| self.row_of[i].is_some();
        let mut value = 0.0;
        for &i in &self.active {
            value -= g.prefs[i].phi * g.prefs[i].alpha * g.self_term(i, &tracks[i].traj);
        }
        for &(i, j) in &self.conflicting {
            if is_active(i) || is_active(j) {
                value -= g.pair_weight(i, j) * g.pair_term(i, j, &tracks[i].traj, &tracks[j].traj);
            }
        }
        let mut collision = 0.0;
        for &(i, j) in &self.constrained {
            if is_active(i) || is_active(j) {
                self.pair_rows(i, j, &tracks[i], &tracks[j], 0, &mut |c| {
                    if c > 0.0 {
                        collision += c * c;
                    }
                });
            }
        }
        let mut dynamics = 0.0;
        for &i in &self.active {
            self.dynamics_of(&tracks[i], 0, &mut |d| {
                if d > 0.0 {
                    dynamics += d * d;
                }
            });
        }
        value + w.lambda * collision + w.mu * dynamics
    }

    /// Central differences, re-evaluating only the terms that involve the
    /// perturbed vehicle.
    fn merit_gradient(&self, x: &[f64], w: &PenaltyWeights, h: f64, grad: &mut [f64]) {
        let horizon = self.game.params.horizon;
        let tracks = self.tracks(x);
        let mut row = vec![0.0; horizon];
        let mut probe = Track::clone(&tracks[0]);
        for (r, &i) in self.active.iter().enumerate() {
            // the sampled points before the perturbed step stay those of `i`
            probe.clone_from(&tracks[i]);
            row.copy_from_slice(&x[r * horizon..(r + 1) * horizon]);
            for t in 0..horizon {
                let orig = row[t];
                row[t] = orig + h;
                self.game.rollout_vehicle_into(i, &row, &mut probe.traj);
                self.fill_points(i, &mut probe, t);
                let up = self.local_merit(i, &probe, &tracks, w, t);
                row[t] = orig - h;
                self.game.rollout_vehicle_into(i, &row, &mut probe.traj);
                self.fill_points(i, &mut probe, t);
                let down = self.local_merit(i, &probe, &tracks, w, t);
                row[t] = orig;
                grad[r * horizon + t] = (up - down) / (2.0 * h);
            }
        }
    }
}
