use apg_core::agents::{hdv_decide, track_desired_speed, ArchetypeConfig, HdvConfig};
use apg_core::scenario::{cav_count, spawn_vehicles, GeometryConfig, SpawnConfig};
use apg_core::shapley::{
    batched_shapley, coarsen_batches, normalize_weights, redistribute_supernode, shapley_closed_form, shapley_exact,
    Coalition, RewardLedger,
};
use apg_core::solver::{ConstraintConfig, GameProblem, Objective, PenaltyWeights};
use apg_core::utility::{group_reward, individual_utility, rollout, system_potential, RewardWeights};
use apg_core::{ActionProfile, Archetype, Game, Preference, Scenario, UtilityParams, VehicleKind, VehicleState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn scenario() -> &'static Scenario {
    static S: OnceLock<Scenario> = OnceLock::new();
    S.get_or_init(|| Scenario::four_arm(&GeometryConfig::default()))
}

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

prop_compose! {
    fn arb_vehicle(id: usize)(path in 0usize..12, s in 0.0..70.0f64, v in 0.0..12.0f64) -> VehicleState {
        vehicle(id, path, s, v)
    }
}

fn arb_scene(max: usize) -> impl Strategy<Value = Vec<VehicleState>> {
    (2..=max).prop_flat_map(|n| (0..n).map(arb_vehicle).collect::<Vec<_>>())
}

fn arb_row(horizon: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-6.0..3.0f64, horizon)
}

fn arb_profile(n: usize, horizon: usize) -> impl Strategy<Value = ActionProfile> {
    proptest::collection::vec(arb_row(horizon), n).prop_map(|rows| ActionProfile::from_rows(&rows))
}

fn scene_and_profile(max: usize) -> impl Strategy<Value = (Vec<VehicleState>, ActionProfile)> {
    let horizon = UtilityParams::default().horizon;
    arb_scene(max).prop_flat_map(move |vs| {
        let n = vs.len();
        (Just(vs), arb_profile(n, horizon))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn homogeneous_weights_give_an_exact_potential(
        (vs, profile) in scene_and_profile(6),
        who in 0usize..6,
        row in arb_row(8),
        phi in 0.2..3.0f64, alpha in 0.2..3.0f64, beta in 0.2..20.0f64,
    ) {
        let params = UtilityParams::default();
        let prefs = vec![Preference::new(alpha, beta, phi); vs.len()];
        let game = Game::new(scenario(), &vs, &prefs, &params);
        let i = who % vs.len();
        let mut deviated = profile.clone();
        deviated.row_mut(i).copy_from_slice(&row);
        let ds = system_potential(&deviated, &game) - system_potential(&profile, &game);
        let du = individual_utility(i, &deviated, &game) - individual_utility(i, &profile, &game);
        prop_assert!((ds - phi * du).abs() <= 1e-9 * ds.abs().max(1.0), "dS {ds} vs phi*du {}", phi * du);
    }

    #[test]
    fn common_weight_scaling_keeps_profile_ranking(
        vs in arb_scene(4),
        seeds in proptest::collection::vec(any::<u64>(), 5),
        scale in 0.1..10.0f64,
    ) {
        let params = UtilityParams::default();
        let n = vs.len();
        let base: Vec<Preference> = (0..n).map(|k| Preference::new(0.5 + k as f64 * 0.3, 2.0 + k as f64, 0.4 + 0.2 * k as f64)).collect();
        let scaled: Vec<Preference> = base.iter().map(|p| Preference::new(p.alpha * scale, p.beta * scale, p.phi * scale)).collect();
        let g1 = Game::new(scenario(), &vs, &base, &params);
        let g2 = Game::new(scenario(), &vs, &scaled, &params);
        let profiles: Vec<ActionProfile> = seeds
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let data = (0..n * params.horizon).map(|_| rand::Rng::random_range(&mut rng, -6.0..3.0)).collect();
                ActionProfile::from_flat(n, params.horizon, data)
            })
            .collect();
        let s1: Vec<f64> = profiles.iter().map(|p| system_potential(p, &g1)).collect();
        let s2: Vec<f64> = profiles.iter().map(|p| system_potential(p, &g2)).collect();
        for a in 0..profiles.len() {
            for b in 0..profiles.len() {
                let d1 = s1[a] - s1[b];
                if d1.abs() > 1e-9 * s1[a].abs().max(1.0) {
                    prop_assert_eq!(d1 > 0.0, s2[a] - s2[b] > 0.0);
                }
            }
        }
    }

    #[test]
    fn group_reward_is_symmetric_and_nonnegative(
        di in -50.0..100.0f64, vi in 0.0..12.0f64, dj in -50.0..100.0f64, vj in 0.0..12.0f64,
    ) {
        let a = group_reward(di, vi, dj, vj, 0.1);
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, group_reward(dj, vj, di, vi, 0.1));
    }

    #[test]
    fn utility_grows_with_discount_for_nonnegative_rewards(
        (vs, profile) in scene_and_profile(4),
        g_lo in 0.1..0.95f64, bump in 0.0..0.05f64,
    ) {
        // no distance or comfort terms: every per-step reward is nonnegative
        let reward = RewardWeights { w_dist: 0.0, w_comfort: 0.0, ..RewardWeights::default() };
        let lo = UtilityParams { gamma: g_lo, reward: reward.clone(), ..UtilityParams::default() };
        let hi = UtilityParams { gamma: g_lo + bump, reward, ..UtilityParams::default() };
        let prefs = vec![Preference::new(1.0, 10.0, 1.0); vs.len()];
        for i in 0..vs.len() {
            let u_lo = individual_utility(i, &profile, &Game::new(scenario(), &vs, &prefs, &lo));
            let u_hi = individual_utility(i, &profile, &Game::new(scenario(), &vs, &prefs, &hi));
            prop_assert!(u_hi >= u_lo - 1e-9 * u_lo.abs().max(1.0));
        }
    }

    #[test]
    fn rollout_never_reverses_or_speeds_past_limit(
        s in 0.0..100.0f64, v in 0.0..12.0f64, row in arb_row(8),
    ) {
        let t = rollout(&vehicle(0, 1, s, v), &row, 0.5, 12.0);
        for k in 0..t.v.len() {
            prop_assert!((0.0..=12.0).contains(&t.v[k]));
            if k > 0 {
                prop_assert!(t.s[k] >= t.s[k - 1]);
            }
        }
    }

    #[test]
    fn shapley_axioms_hold_on_random_games(
        n in 1usize..=6,
        raw_u in proptest::collection::vec(-10.0..10.0f64, 64),
        raw_w in proptest::collection::vec(-10.0..10.0f64, 64),
        null in 0usize..6,
    ) {
        let n_sub = 1usize << n;
        let null = null % n;
        // u: arbitrary game with a null player; w: arbitrary game
        let u = |c: Coalition| -> f64 {
            let m = c.0 as usize & !(1 << null);
            if m == 0 { 0.0 } else { raw_u[m % 64] }
        };
        let w = |c: Coalition| -> f64 { if c.0 == 0 { 0.0 } else { raw_w[c.0 as usize % 64] } };
        let pu = shapley_exact(u, n).unwrap();
        let pw = shapley_exact(w, n).unwrap();
        let grand = Coalition((n_sub - 1) as u32);
        prop_assert!((pu.iter().sum::<f64>() - u(grand)).abs() < 1e-9);
        prop_assert!((pw.iter().sum::<f64>() - w(grand)).abs() < 1e-9);
        prop_assert!(pu[null].abs() < 1e-9);
        let sum = shapley_exact(|c| u(c) + 2.5 * w(c), n).unwrap();
        for k in 0..n {
            prop_assert!((sum[k] - (pu[k] + 2.5 * pw[k])).abs() < 1e-9);
        }
        // symmetric game: value depends on the coalition size only
        let sym = |c: Coalition| raw_w[c.len()] - raw_w[0];
        let ps = shapley_exact(sym, n).unwrap();
        for k in 1..n {
            prop_assert!((ps[k] - ps[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_form_matches_enumeration((vs, profile) in scene_and_profile(6)) {
        let params = UtilityParams::default();
        let prefs = vec![Preference::new(1.0, 10.0, 1.0); vs.len()];
        let game = Game::new(scenario(), &vs, &prefs, &params);
        let trajs = game.rollout_all(&profile);
        let value = |c: Coalition| {
            let members: Vec<usize> = c.members().collect();
            let mut total = 0.0;
            for (k, &i) in members.iter().enumerate() {
                total += game.self_term(i, &trajs[i]);
                for &j in &members[k + 1..] {
                    total += game.pair_term(i, j, &trajs[i], &trajs[j]);
                }
            }
            total
        };
        let exact = shapley_exact(value, vs.len()).unwrap();
        let closed = shapley_closed_form(&game, &trajs);
        for (a, b) in exact.iter().zip(&closed) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn redistribution_conserves_the_batch_value(
        phi_b in -100.0..100.0f64,
        singles in proptest::collection::vec(-20.0..20.0f64, 1..6),
    ) {
        let out = redistribute_supernode(phi_b, &singles);
        prop_assert_eq!(out.len(), singles.len());
        prop_assert!((out.iter().sum::<f64>() - phi_b).abs() <= 1e-12 * phi_b.abs().max(1.0));
        let positive: Vec<f64> = singles.iter().map(|s| s.abs() + 0.1).collect();
        let out = redistribute_supernode(phi_b, &positive);
        prop_assert!((out.iter().sum::<f64>() - phi_b).abs() <= 1e-12 * phi_b.abs().max(1.0));
    }

    #[test]
    fn singleton_batches_reproduce_exact_values((vs, profile) in scene_and_profile(6)) {
        let params = UtilityParams::default();
        let prefs = vec![Preference::new(1.0, 10.0, 1.0); vs.len()];
        let game = Game::new(scenario(), &vs, &prefs, &params);
        let trajs = game.rollout_all(&profile);
        let ledger = RewardLedger::from_game(&game, &trajs);
        let exact = ledger.shapley();
        let batched = batched_shapley(&ledger, &coarsen_batches(&vs, 8.0, 1));
        for (a, b) in exact.iter().zip(&batched) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        // any coarsening keeps the total
        let coarse = batched_shapley(&ledger, &coarsen_batches(&vs, 30.0, 4));
        let total: f64 = exact.iter().sum();
        prop_assert!((coarse.iter().sum::<f64>() - total).abs() <= 1e-9 * total.abs().max(1.0));
    }

    #[test]
    fn normalized_weights_are_positive_ordered_mean_one(raw in proptest::collection::vec(-500.0..500.0f64, 1..9)) {
        let w = normalize_weights(&raw);
        prop_assert!(w.iter().all(|&x| x > 0.0));
        prop_assert!((w.iter().sum::<f64>() / w.len() as f64 - 1.0).abs() < 1e-12);
        for a in 0..raw.len() {
            for b in 0..raw.len() {
                if raw[a] < raw[b] {
                    prop_assert!(w[a] < w[b]);
                }
            }
        }
    }

    #[test]
    fn human_drivers_pick_from_the_action_set(vs in arb_scene(5), k in 0usize..3) {
        let cfg = HdvConfig::default();
        let params = UtilityParams::default();
        let profile = ArchetypeConfig::default().profile(Archetype::ALL[k]);
        let a = hdv_decide(&vs[0], &vs, &profile, scenario(), &params, &cfg);
        prop_assert!(cfg.actions.contains(a));
    }

    #[test]
    fn speed_tracking_stays_in_bounds(v in 0.0..12.0f64) {
        let cfg = HdvConfig::default();
        let a = track_desired_speed(v, &cfg);
        prop_assert!(a >= cfg.actions.min() && a <= cfg.actions.max());
        prop_assert!((a - 0.5 * (10.0 - v)).abs() < 1e-12 || a == cfg.actions.min() || a == cfg.actions.max());
    }

    #[test]
    fn solver_gradient_matches_potential_differences((vs, profile) in scene_and_profile(4)) {
        let params = UtilityParams::default();
        let prefs: Vec<Preference> = (0..vs.len()).map(|k| Preference::new(1.0 + 0.1 * k as f64, 10.0, 1.0)).collect();
        let game = Game::new(scenario(), &vs, &prefs, &params);
        let problem = GameProblem::full(&game, ConstraintConfig::default());
        let x = problem.pack(&profile);
        // no penalty: the merit is exactly -S
        let w = PenaltyWeights { lambda: 0.0, mu: 0.0 };
        let mut grad = vec![0.0; x.len()];
        problem.merit_gradient(&x, &w, 1e-5, &mut grad);
        let h = 1e-5;
        for k in 0..x.len() {
            let mut up = profile.clone();
            up.as_mut_slice()[k] += h;
            let mut down = profile.clone();
            down.as_mut_slice()[k] -= h;
            let fd = -(system_potential(&up, &game) - system_potential(&down, &game)) / (2.0 * h);
            prop_assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1.0), "component {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn spawns_are_valid_and_reproducible(seed in any::<u64>(), n in 1usize..=8, p in 0.0..=1.0f64) {
        let cfg = SpawnConfig::default();
        let a = spawn_vehicles(scenario(), n, p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = spawn_vehicles(scenario(), n, p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        prop_assert_eq!(a.iter().filter(|v| v.kind == VehicleKind::Cav).count(), cav_count(n, p));
        for v in &a {
            let stop = scenario().path(v.path).stop_line_s;
            prop_assert!(stop - v.s >= 30.0 - 1e-9 && stop - v.s <= 50.0 + 1e-9);
            prop_assert!((6.0..=10.0).contains(&v.v));
            prop_assert_eq!(v.a, 0.0);
            for o in &a {
                if o.id != v.id && scenario().path(o.path).approach == scenario().path(v.path).approach {
                    prop_assert!((o.s - v.s).abs() >= cfg.min_headway - 1e-9);
                }
            }
        }
    }
}

/// Mean acceleration each archetype picks over random conflict states.
#[test]
fn archetypes_are_ordered_by_assertiveness() {
    let cfg = HdvConfig::default();
    let params = UtilityParams::default();
    let presets = ArchetypeConfig::default();
    let sc = scenario();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sums = [0.0; 3];
    let mut states = 0;
    while states < 600 {
        let me = vehicle(0, rand::Rng::random_range(&mut rng, 0..12), rand::Rng::random_range(&mut rng, 20.0..60.0), rand::Rng::random_range(&mut rng, 3.0..12.0));
        let path = rand::Rng::random_range(&mut rng, 0..12);
        let Some((cp_me, cp_other)) = sc.conflict_arclengths(me.path, path) else {
            continue;
        };
        // the other vehicle arrives at the conflict point around the same time
        let ttcp = (cp_me - me.s) / me.v.max(0.1);
        let v_other = rand::Rng::random_range(&mut rng, 4.0..12.0);
        let jitter = rand::Rng::random_range(&mut rng, -1.0..1.0);
        let s_other = cp_other - v_other * (ttcp + jitter).max(0.2);
        if s_other < 0.0 {
            continue;
        }
        let other = vehicle(1, path, s_other, v_other);
        let all = [me, other];
        for (k, a) in Archetype::ALL.iter().enumerate() {
            sums[k] += hdv_decide(&me, &all, &presets.profile(*a), sc, &params, &cfg);
        }
        states += 1;
    }
    let means = sums.map(|s| s / states as f64);
    assert!(means[0] >= means[1] && means[1] >= means[2], "means {means:?}");
}
