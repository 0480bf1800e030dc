//! Shapley weights of the participants: exact coalition enumeration (used as
//! an oracle), the linear closed form used in production, and batch
//! coarsening into supernodes.

use crate::scenario::VehicleState;
use crate::utility::{Game, PredictedTrajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest player count accepted by [`shapley_exact`].
pub const EXACT_MAX_PLAYERS: usize = 10;

/// Additive floor applied before normalization; a null player ends up here.
pub const WEIGHT_FLOOR: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ShapleyError {
    #[error("exact enumeration supports at most {max} players, got {n}; use shapley_closed_form")]
    TooManyPlayers { n: usize, max: usize },
}

/// A coalition as a bit set over player indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Coalition(pub u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn contains(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn with(self, i: usize) -> Coalition {
        Coalition(self.0 | (1 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&i| self.contains(i))
    }
}

/// Exact Shapley values by enumerating every coalition. `value` must map the
/// empty coalition to zero.
pub fn shapley_exact<F>(value: F, n: usize) -> Result<Vec<f64>, ShapleyError>
where
    F: Fn(Coalition) -> f64,
{
    if n > EXACT_MAX_PLAYERS {
        return Err(ShapleyError::TooManyPlayers {
            n,
            max: EXACT_MAX_PLAYERS,
        });
    }
    let subsets = 1usize << n;
    let values: Vec<f64> = (0..subsets).map(|m| value(Coalition(m as u32))).collect();
    debug_assert!(values[0] == 0.0, "coalition value of the empty set must be 0");
    let mut fact = vec![1.0_f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    let mut phi = vec![0.0; n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        for m in 0..subsets {
            let c = Coalition(m as u32);
            if c.contains(i) {
                continue;
            }
            let k = c.len();
            let weight = fact[k] * fact[n - k - 1] / fact[n];
            *phi_i += weight * (values[c.with(i).0 as usize] - values[m]);
        }
    }
    Ok(phi)
}

/// Discounted reward sums of a solved profile: the ingredients of the
/// additive coalition game induced by the unweighted potential.
#[derive(Clone, Debug)]
pub struct RewardLedger {
    pub self_terms: Vec<f64>,
    /// Row-major `n x n`, symmetric, zero diagonal.
    pub pair_terms: Vec<f64>,
}

impl RewardLedger {
    pub fn from_game(game: &Game<'_>, trajs: &[PredictedTrajectory]) -> Self {
        let n = game.len();
        let self_terms = (0..n).map(|i| game.self_term(i, &trajs[i])).collect();
        let mut pair_terms = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let g = game.pair_term(i, j, &trajs[i], &trajs[j]);
                pair_terms[i * n + j] = g;
                pair_terms[j * n + i] = g;
            }
        }
        Self { self_terms, pair_terms }
    }

    pub fn len(&self) -> usize {
        self.self_terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.self_terms.is_empty()
    }

    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.pair_terms[i * self.len() + j]
    }

    /// Value of a coalition in the induced additive game.
    pub fn coalition_value(&self, c: Coalition) -> f64 {
        let members: Vec<usize> = c.members().filter(|&i| i < self.len()).collect();
        let mut total = 0.0;
        for (k, &i) in members.iter().enumerate() {
            total += self.self_terms[i];
            for &j in &members[k + 1..] {
                total += self.pair(i, j);
            }
        }
        total
    }

    /// Shapley values of the additive game: each self term belongs to its
    /// owner and each pair term is split evenly.
    pub fn shapley(&self) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut phi = self.self_terms[i];
                for j in 0..n {
                    if j != i {
                        phi += 0.5 * self.pair(i, j);
                    }
                }
                phi
            })
            .collect()
    }
}

/// Raw Shapley values of every participant under the trajectories of the
/// current best-known profile.
pub fn shapley_closed_form(game: &Game<'_>, trajs: &[PredictedTrajectory]) -> Vec<f64> {
    RewardLedger::from_game(game, trajs).shapley()
}

/// A group of vehicles treated as one player.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub members: Vec<usize>,
}

/// Groups same-path vehicles whose consecutive gaps are below
/// `headway_threshold`, front to back, at most `max_batch` per group.
pub fn coarsen_batches(vehicles: &[VehicleState], headway_threshold: f64, max_batch: usize) -> Vec<Batch> {
    let max_batch = max_batch.max(1);
    let mut order: Vec<usize> = (0..vehicles.len()).collect();
    // by path, then front (largest s) first; index breaks ties
    order.sort_by(|&a, &b| {
        vehicles[a]
            .path
            .cmp(&vehicles[b].path)
            .then(vehicles[b].s.total_cmp(&vehicles[a].s))
            .then(a.cmp(&b))
    });
    let mut batches: Vec<Batch> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for &i in &order {
        if let Some(&last) = current.last() {
            let same_path = vehicles[last].path == vehicles[i].path;
            let gap = vehicles[last].s - vehicles[i].s;
            if !(same_path && gap < headway_threshold && current.len() < max_batch) {
                batches.push(Batch {
                    members: std::mem::take(&mut current),
                });
            }
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(Batch { members: current });
    }
    batches.sort_by_key(|b| b.members.iter().copied().min());
    batches
}

/// Splits a supernode's value among its members in proportion to their
/// singleton values, or evenly when those do not sum to a positive number.
pub fn redistribute_supernode(phi_b: f64, singleton_values: &[f64]) -> Vec<f64> {
    let n = singleton_values.len();
    if n == 0 {
        return Vec::new();
    }
    let total: f64 = singleton_values.iter().sum();
    let mut out: Vec<f64> = if total > 0.0 {
        singleton_values.iter().map(|&v| phi_b * v / total).collect()
    } else {
        vec![phi_b / n as f64; n]
    };
    // absorb rounding in the last share so the batch total is preserved
    let head: f64 = out[..n - 1].iter().sum();
    out[n - 1] = phi_b - head;
    out
}

/// Shapley values with batches as players, redistributed to members.
pub fn batched_shapley(ledger: &RewardLedger, batches: &[Batch]) -> Vec<f64> {
    let n = ledger.len();
    let mut owner = vec![usize::MAX; n];
    for (b, batch) in batches.iter().enumerate() {
        for &i in &batch.members {
            owner[i] = b;
        }
    }
    let mut phi = vec![0.0; n];
    for (b, batch) in batches.iter().enumerate() {
        let mut phi_b = 0.0;
        for &i in &batch.members {
            phi_b += ledger.self_terms[i];
            for j in 0..n {
                if j == i {
                    continue;
                }
                if owner[j] == b {
                    // internal pairs: counted once per unordered pair
                    if i < j {
                        phi_b += ledger.pair(i, j);
                    }
                } else {
                    phi_b += 0.5 * ledger.pair(i, j);
                }
            }
        }
        let singles: Vec<f64> = batch.members.iter().map(|&i| ledger.self_terms[i]).collect();
        for (&i, share) in batch.members.iter().zip(redistribute_supernode(phi_b, &singles)) {
            phi[i] = share;
        }
    }
    phi
}

/// Maps raw Shapley values to positive multiplicative weights with mean one,
/// preserving their order.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![1.0; raw.len()];
    }
    let shifted: Vec<f64> = raw.iter().map(|&r| (r - min).max(0.0) + WEIGHT_FLOOR).collect();
    let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
    shifted.into_iter().map(|w| w / mean).collect()
}
