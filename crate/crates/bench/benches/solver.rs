use apg_core::engine::solve_plan;
use apg_core::shapley::{batched_shapley, coarsen_batches, shapley_closed_form, RewardLedger};
use apg_core::solver::{solve, FnProblem, SolverOptions};
use apg_core::{ActionProfile, Game, Preference, Scenario, ScenarioConfig, VehicleKind, VehicleState};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn scene(n: usize) -> Vec<VehicleState> {
    (0..n)
        .map(|id| VehicleState {
            id,
            path: (id * 5) % 12,
            s: 10.0 + 6.0 * (id % 4) as f64,
            v: 8.0,
            a: 0.0,
            kind: VehicleKind::Cav,
            length: 4.5,
            width: 2.0,
        })
        .collect()
}

fn bench_quadratic(c: &mut Criterion) {
    let dim = 32;
    let problem = FnProblem::unbounded(dim, move |x| {
        -x.iter().enumerate().map(|(k, v)| 0.5 * (1.0 + k as f64) * v * v - v).sum::<f64>()
    });
    let opts = SolverOptions { max_iterations: 200, tolerance: 1e-8, ..SolverOptions::default() };
    c.bench_function("bfgs_quadratic_32", |b| b.iter(|| solve(&problem, black_box(&vec![0.0; dim]), &opts)));
}

fn bench_plan(c: &mut Criterion) {
    let cfg = ScenarioConfig::default();
    let scenario = Scenario::four_arm(&cfg.geometry);
    let params = cfg.utility.clone();
    let mut group = c.benchmark_group("solve_plan");
    group.sample_size(10);
    for n in [2, 4, 8] {
        let vs = scene(n);
        let prefs = vec![Preference::new(1.0, 10.0, 1.0); n];
        let game = Game::new(&scenario, &vs, &prefs, &params);
        let bounds = vec![(params.a_min, params.a_max); n];
        let warm = ActionProfile::zeros(n, params.horizon);
        group.bench_function(format!("{n}_vehicles"), |b| b.iter(|| solve_plan(&game, &warm, &bounds, &cfg)));
    }
    group.finish();
}

fn bench_shapley(c: &mut Criterion) {
    let cfg = ScenarioConfig::default();
    let scenario = Scenario::four_arm(&cfg.geometry);
    let vs = scene(8);
    let prefs = vec![Preference::new(1.0, 10.0, 1.0); 8];
    let game = Game::new(&scenario, &vs, &prefs, &cfg.utility);
    let trajs = game.rollout_all(&ActionProfile::zeros(8, cfg.utility.horizon));
    c.bench_function("shapley_closed_form_8", |b| b.iter(|| shapley_closed_form(&game, black_box(&trajs))));
    let ledger = RewardLedger::from_game(&game, &trajs);
    let batches = coarsen_batches(&vs, 40.0, 4);
    c.bench_function("shapley_batched_8", |b| b.iter(|| batched_shapley(&ledger, black_box(&batches))));
}

criterion_group!(benches, bench_quadratic, bench_plan, bench_shapley);
criterion_main!(benches);
