//! Closed-form lower-level allocation.
//!
//! Generation: the supplier splits supply `s` over generators with quadratic
//! costs `0.5 delta_g e_g^2` subject to `sum e_g = s`. The minimizer loads each
//! generator in proportion to `1/delta_g` and the total cost collapses to
//! `0.5 delta_bar s^2`.
//!
//! Consumption: a user splits demand `d` over appliances maximizing
//! `sum psi_a ln v_a` subject to `sum v_a = d`. With `sum psi_a = q` the
//! maximizer is `v_a = (psi_a / q) d` with multiplier `q / d`; for `q = 1`
//! this is the familiar `v_a = psi_a d`, `lambda = 1/d`. Which of the two
//! normalizations the consumption layer was meant to carry is ambiguous; the
//! allocation here always satisfies the demand constraint.
//!
//! The utility coefficient keeps the form `psi_bar = exp(sum psi_a ln psi_a)`
//! (with `0 ln 0 = 0`) independently of the allocation normalization, so that
//! the game layer sees the same coefficient in both readings.

use serde::Serialize;
use thiserror::Error;

use crate::scenario::BUDGET_TOLERANCE;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error("generator set is empty")]
    EmptyGenerators,
    #[error("generator {index} has non-positive cost coefficient {value}")]
    NonPositiveDelta { index: usize, value: f64 },
    #[error("supply must be nonnegative, got {0}")]
    NegativeSupply(f64),
    #[error("appliance set is empty")]
    EmptyAppliances,
    #[error("appliance {index} has negative weight {value}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected {q}")]
    BudgetMismatch { sum: f64, q: f64 },
    #[error("demand must be nonnegative, got {0}")]
    NonPositiveDemand(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationAllocation {
    /// Output per generator.
    pub e: Vec<f64>,
    /// Multiplier of `sum e = s`.
    pub lambda: f64,
    /// Total generation cost `sum 0.5 delta_g e_g^2`.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsumptionAllocation {
    /// Energy per appliance.
    pub v: Vec<f64>,
    /// Multiplier of `sum v = d`; `None` at `d = 0` where it is undefined.
    pub lambda: Option<f64>,
    /// Utility `psi_bar d^(sigma q)` with `sigma q = 1`.
    pub utility: f64,
}

fn check_deltas(delta: &[f64]) -> Result<(), AllocationError> {
    if delta.is_empty() {
        return Err(AllocationError::EmptyGenerators);
    }
    for (index, &value) in delta.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(AllocationError::NonPositiveDelta { index, value });
        }
    }
    Ok(())
}

/// `delta_bar = sum_g (1/delta_g) (1 / sum_h 1/delta_h)^2`.
///
/// Algebraically this is `1 / sum 1/delta`; the double sum is kept as written
/// and the identity is checked in tests.
pub fn aggregate_generation_cost(delta: &[f64]) -> Result<f64, AllocationError> {
    check_deltas(delta)?;
    let inv_sum: f64 = delta.iter().map(|d| 1.0 / d).sum();
    let share = 1.0 / inv_sum;
    Ok(delta.iter().map(|d| (1.0 / d) * share * share).sum())
}

pub fn solve_generation(delta: &[f64], s: f64) -> Result<GenerationAllocation, AllocationError> {
    check_deltas(delta)?;
    if !(s >= 0.0) {
        return Err(AllocationError::NegativeSupply(s));
    }
    let inv_sum: f64 = delta.iter().map(|d| 1.0 / d).sum();
    let e: Vec<f64> = delta.iter().map(|d| s / (d * inv_sum)).collect();
    let cost = delta.iter().zip(&e).map(|(d, x)| 0.5 * d * x * x).sum();
    Ok(GenerationAllocation {
        e,
        lambda: -s / inv_sum,
        cost,
    })
}

fn check_weights(psi: &[f64]) -> Result<(), AllocationError> {
    if psi.is_empty() {
        return Err(AllocationError::EmptyAppliances);
    }
    for (index, &value) in psi.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(AllocationError::NegativeWeight { index, value });
        }
    }
    Ok(())
}

/// `psi_bar = exp(sum psi ln psi)` with `0 ln 0 = 0`.
pub fn utility_coefficient(psi: &[f64]) -> Result<f64, AllocationError> {
    check_weights(psi)?;
    let exponent: f64 = psi
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * w.ln())
        .sum();
    Ok(exponent.exp())
}

pub fn solve_consumption(psi: &[f64], d: f64, q: f64) -> Result<ConsumptionAllocation, AllocationError> {
    check_weights(psi)?;
    let sum: f64 = psi.iter().sum();
    if (sum - q).abs() > BUDGET_TOLERANCE {
        return Err(AllocationError::BudgetMismatch { sum, q });
    }
    if !(d >= 0.0) {
        return Err(AllocationError::NonPositiveDemand(d));
    }
    if d == 0.0 {
        return Ok(ConsumptionAllocation {
            v: vec![0.0; psi.len()],
            lambda: None,
            utility: 0.0,
        });
    }
    let psi_bar = utility_coefficient(psi)?;
    Ok(ConsumptionAllocation {
        v: psi.iter().map(|w| w / q * d).collect(),
        lambda: Some(q / d),
        utility: psi_bar * d,
    })
}

/// Objective of the log-transformed consumption problem; `-inf` if a
/// positively weighted appliance gets nothing.
pub fn log_utility(psi: &[f64], v: &[f64]) -> f64 {
    psi.iter()
        .zip(v)
        .map(|(&w, &x)| if w == 0.0 { 0.0 } else { w * x.ln() })
        .sum()
}
