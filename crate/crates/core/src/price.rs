//! Sticky price dynamics `p_{t+1} = (1 + omega_t) p_t + gamma (d_t - s_t) + eta_t`.
//!
//! The deterministic path uses `eta = 0`. For open-loop strategies the
//! disturbance enters additively and linearly, so the expected stochastic
//! path equals the deterministic one; [`monte_carlo_mean`] estimates that
//! expectation by sampling. Prices may go negative and are not clamped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::scenario::ReducedScenario;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PriceError {
    #[error("{what}: expected length {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("monte carlo needs at least one draw")]
    NoDraws,
}

/// Prices for slots `1..=T+1` (index 0 is the initial price).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PricePath(Vec<f64>);

impl PricePath {
    pub fn new(values: Vec<f64>) -> Self {
        PricePath(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn terminal(&self) -> f64 {
        *self.0.last().expect("price path is never empty")
    }

    pub fn max_abs_diff(&self, other: &PricePath) -> f64 {
        max_abs_diff(&self.0, &other.0)
    }
}

impl std::ops::Index<usize> for PricePath {
    type Output = f64;

    fn index(&self, t: usize) -> &f64 {
        &self.0[t]
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One draw of the market disturbance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseDraw {
    pub eta: Vec<f64>,
    pub seed: u64,
}

impl NoiseDraw {
    /// Gaussian draw with per-slot variance, reproducible from `seed`.
    pub fn sample(variance: &[f64], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = variance
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v.sqrt() * z
            })
            .collect();
        NoiseDraw { eta, seed }
    }
}

/// Seed of trajectory `index` derived from `master` (SplitMix64 finalizer).
pub fn sub_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn step(p: f64, omega: f64, gamma: f64, total_demand: f64, supply: f64, eta: f64) -> f64 {
    (1.0 + omega) * p + gamma * (total_demand - supply) + eta
}

fn check_inputs(reduced: &ReducedScenario, demands: &[Vec<f64>], supply: &[f64]) -> Result<(), PriceError> {
    let slots = reduced.slots();
    if demands.len() != reduced.num_users() {
        return Err(PriceError::DimensionMismatch {
            what: "demand rows",
            expected: reduced.num_users(),
            found: demands.len(),
        });
    }
    if let Some(row) = demands.iter().find(|r| r.len() != slots) {
        return Err(PriceError::DimensionMismatch {
            what: "demand slots",
            expected: slots,
            found: row.len(),
        });
    }
    if supply.len() != slots {
        return Err(PriceError::DimensionMismatch {
            what: "supply",
            expected: slots,
            found: supply.len(),
        });
    }
    Ok(())
}

pub(crate) fn total_demand(demands: &[Vec<f64>], t: usize) -> f64 {
    demands.iter().map(|row| row[t]).sum()
}

fn roll(reduced: &ReducedScenario, demands: &[Vec<f64>], supply: &[f64], eta: Option<&[f64]>) -> PricePath {
    let slots = reduced.slots();
    let mut p = Vec::with_capacity(slots + 1);
    p.push(reduced.initial_price());
    for t in 0..slots {
        let noise = eta.map_or(0.0, |e| e[t]);
        let next = step(
            p[t],
            reduced.omega(t),
            reduced.gamma(),
            total_demand(demands, t),
            supply[t],
            noise,
        );
        p.push(next);
    }
    PricePath(p)
}

/// Deterministic price path for `demands[i][t]` and `supply[t]`.
pub fn roll_deterministic(
    reduced: &ReducedScenario,
    demands: &[Vec<f64>],
    supply: &[f64],
) -> Result<PricePath, PriceError> {
    check_inputs(reduced, demands, supply)?;
    Ok(roll(reduced, demands, supply, None))
}

pub fn roll_stochastic(
    reduced: &ReducedScenario,
    demands: &[Vec<f64>],
    supply: &[f64],
    noise: &NoiseDraw,
) -> Result<PricePath, PriceError> {
    check_inputs(reduced, demands, supply)?;
    if noise.eta.len() != reduced.slots() {
        return Err(PriceError::DimensionMismatch {
            what: "noise",
            expected: reduced.slots(),
            found: noise.eta.len(),
        });
    }
    Ok(roll(reduced, demands, supply, Some(&noise.eta)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub mean: PricePath,
    /// Standard error of the mean per slot (zero for a single draw).
    pub std_error: Vec<f64>,
    pub draws: usize,
    pub seed: u64,
}

/// Sample mean of `draws` independent stochastic price paths.
///
/// Trajectory `k` uses [`sub_seed`]`(seed, k)`, so the result does not depend
/// on how the draws are scheduled across threads.
pub fn monte_carlo_mean(
    reduced: &ReducedScenario,
    demands: &[Vec<f64>],
    supply: &[f64],
    draws: usize,
    seed: u64,
) -> Result<MonteCarloSummary, PriceError> {
    check_inputs(reduced, demands, supply)?;
    if draws == 0 {
        return Err(PriceError::NoDraws);
    }
    let len = reduced.slots() + 1;
    if reduced.noise_variance().iter().all(|&v| v == 0.0) {
        return Ok(MonteCarloSummary {
            mean: roll(reduced, demands, supply, None),
            std_error: vec![0.0; len],
            draws,
            seed,
        });
    }
    let paths: Vec<PricePath> = (0..draws as u64)
        .into_par_iter()
        .map(|k| {
            let noise = NoiseDraw::sample(reduced.noise_variance(), sub_seed(seed, k));
            roll(reduced, demands, supply, Some(&noise.eta))
        })
        .collect();
    let m = draws as f64;
    let mut mean = vec![0.0; len];
    for path in &paths {
        for (acc, x) in mean.iter_mut().zip(path.as_slice()) {
            *acc += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m);
    let std_error = if draws < 2 {
        vec![0.0; len]
    } else {
        let mut var = vec![0.0; len];
        for path in &paths {
            for ((acc, x), mu) in var.iter_mut().zip(path.as_slice()).zip(&mean) {
                *acc += (x - mu).powi(2);
            }
        }
        var.iter().map(|v| (v / (m - 1.0) / m).sqrt()).collect()
    };
    Ok(MonteCarloSummary {
        mean: PricePath(mean),
        std_error,
        draws,
        seed,
    })
}
