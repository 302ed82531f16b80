//! Game parameterization, validation and lower-level reduction.
//!
//! A [`Scenario`] holds every parameter of the supplier/users game with all
//! per-slot sequences already expanded to the horizon length. [`validate`]
//! checks every invariant at once and returns the full list of violations;
//! [`reduce`] eliminates the generation and consumption allocation layer and
//! yields a [`ReducedScenario`] carrying the marginal-utility coefficients
//! `psi_bar[i][t]` and aggregated generation-cost coefficients `delta_bar[t]`
//! that the equilibrium solvers consume.
//!
//! Time slots are zero-based in code: slot `t` here is slot `t + 1` of the
//! usual `1..=T` numbering, and the price path has `T + 1` entries.

pub mod file;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{self, AllocationError};

/// Absolute tolerance used for the `sum(psi) == q` and `sigma == 1/q` checks.
pub const BUDGET_TOLERANCE: f64 = 1e-9;

/// Number of time slots `T >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Horizon(usize);

impl Horizon {
    pub fn new(slots: usize) -> Result<Self, Violation> {
        if slots == 0 {
            Err(Violation::EmptyHorizon)
        } else {
            Ok(Horizon(slots))
        }
    }

    pub fn slots(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for Horizon {
    type Error = Violation;

    fn try_from(value: usize) -> Result<Self, Self::Error> {
        Horizon::new(value)
    }
}

impl From<Horizon> for usize {
    fn from(h: Horizon) -> usize {
        h.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceParams {
    /// Price in the first slot.
    pub initial: f64,
    /// Stickiness `omega_t < 0`, one entry per slot.
    pub omega: Vec<f64>,
    /// Force coefficient `gamma > 0` multiplying `d_t - s_t`.
    pub gamma: f64,
    /// Variance of the additive Gaussian disturbance, one entry per slot.
    pub noise_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Adjustment-cost weight per slot.
    pub alpha: Vec<f64>,
    /// Utility sensitivity. Must equal `1/q`.
    pub sigma: f64,
    /// `appliance_weights[t][a]`: importance of appliance `a` in slot `t`.
    pub appliance_weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub appliance_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplierParams {
    /// Imbalance penalty per slot.
    pub kappa: Vec<f64>,
    /// `generator_costs[t][g]`: quadratic cost coefficient of generator `g`.
    pub generator_costs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub horizon: Horizon,
    pub price: PriceParams,
    pub users: Vec<UserParams>,
    pub supplier: SupplierParams,
    /// Common appliance-weight budget: every user's weights sum to `q` in every slot.
    pub q: f64,
}

/// A single broken invariant, located as precisely as possible.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("horizon must contain at least one slot")]
    EmptyHorizon,
    #[error("scenario has no users")]
    EmptyUserSet,
    #[error("{field}: expected {expected} entries, found {found}")]
    LengthMismatch {
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("{field} is not finite")]
    NonFinite { field: String },
    #[error("initial price must be positive, got {0}")]
    NonPositiveInitialPrice(f64),
    #[error("omega[{slot}] = {value} must be negative")]
    NonNegativeOmega { slot: usize, value: f64 },
    #[error("gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("noise_variance[{slot}] = {value} is negative")]
    NegativeNoiseVariance { slot: usize, value: f64 },
    #[error("user {user}: alpha[{slot}] = {value} must be positive")]
    NonPositiveAlpha { user: usize, slot: usize, value: f64 },
    #[error("user {user}: sigma = {sigma} but 1/q = {expected}")]
    SigmaMismatch {
        user: usize,
        sigma: f64,
        expected: f64,
    },
    #[error("user {user}: appliance set is empty in slot {slot}")]
    EmptyApplianceSet { user: usize, slot: usize },
    #[error("user {user}: appliance count changes between slots ({first} then {found} at slot {slot})")]
    InconsistentApplianceSet {
        user: usize,
        slot: usize,
        first: usize,
        found: usize,
    },
    #[error("user {user}: negative appliance weight {value} in slot {slot}")]
    NegativeWeight { user: usize, slot: usize, value: f64 },
    #[error("user {user}: weights in slot {slot} sum to {sum}, expected q = {q}")]
    WeightBudgetMismatch {
        user: usize,
        slot: usize,
        sum: f64,
        q: f64,
    },
    #[error("q must be positive, got {0}")]
    NonPositiveBudget(f64),
    #[error("kappa[{slot}] = {value} must be positive")]
    NonPositiveKappa { slot: usize, value: f64 },
    #[error("generator set is empty in slot {slot}")]
    EmptyGeneratorSet { slot: usize },
    #[error("generator {generator} cost in slot {slot} is {value}, must be positive")]
    NonPositiveDelta {
        slot: usize,
        generator: usize,
        value: f64,
    },
}

/// Every violation found while validating a scenario.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl ValidationError {
    pub fn contains(&self, pred: impl Fn(&Violation) -> bool) -> bool {
        self.violations.iter().any(pred)
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} scenario violation(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("lower-level reduction failed: {0}")]
    Allocation(#[from] AllocationError),
}

struct Checker {
    found: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, v: Violation) {
        self.found.push(v);
    }

    fn length<T>(&mut self, field: impl Into<String>, seq: &[T], expected: usize) -> bool {
        if seq.len() == expected {
            true
        } else {
            self.push(Violation::LengthMismatch {
                field: field.into(),
                expected,
                found: seq.len(),
            });
            false
        }
    }

    fn finite(&mut self, field: impl Into<String>, values: impl IntoIterator<Item = f64>) -> bool {
        if values.into_iter().all(f64::is_finite) {
            true
        } else {
            self.push(Violation::NonFinite {
                field: field.into(),
            });
            false
        }
    }
}

/// Returns the scenario unchanged iff every invariant holds.
pub fn validate(scenario: Scenario) -> Result<Scenario, ValidationError> {
    scenario.check()?;
    Ok(scenario)
}

impl Scenario {
    pub fn slots(&self) -> usize {
        self.horizon.slots()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Checks every invariant and collects all violations.
    pub fn check(&self) -> Result<(), ValidationError> {
        let t_len = self.horizon.slots();
        let mut c = Checker { found: Vec::new() };
        if t_len == 0 {
            c.push(Violation::EmptyHorizon);
        }

        let price = &self.price;
        if c.finite("price.initial", [price.initial]) && price.initial <= 0.0 {
            c.push(Violation::NonPositiveInitialPrice(price.initial));
        }
        if c.finite("price.gamma", [price.gamma]) && price.gamma <= 0.0 {
            c.push(Violation::NonPositiveGamma(price.gamma));
        }
        if c.length("price.omega", &price.omega, t_len)
            && c.finite("price.omega", price.omega.iter().copied())
        {
            for (slot, &value) in price.omega.iter().enumerate() {
                if value >= 0.0 {
                    c.push(Violation::NonNegativeOmega { slot, value });
                }
            }
        }
        if c.length("price.noise_variance", &price.noise_variance, t_len)
            && c.finite("price.noise_variance", price.noise_variance.iter().copied())
        {
            for (slot, &value) in price.noise_variance.iter().enumerate() {
                if value < 0.0 {
                    c.push(Violation::NegativeNoiseVariance { slot, value });
                }
            }
        }

        let q_ok = c.finite("q", [self.q]);
        if q_ok && self.q <= 0.0 {
            c.push(Violation::NonPositiveBudget(self.q));
        }
        let q_ok = q_ok && self.q > 0.0;

        if self.users.is_empty() {
            c.push(Violation::EmptyUserSet);
        }
        for (user, u) in self.users.iter().enumerate() {
            if c.length(format!("users[{user}].alpha"), &u.alpha, t_len)
                && c.finite(format!("users[{user}].alpha"), u.alpha.iter().copied())
            {
                for (slot, &value) in u.alpha.iter().enumerate() {
                    if value <= 0.0 {
                        c.push(Violation::NonPositiveAlpha { user, slot, value });
                    }
                }
            }
            if c.finite(format!("users[{user}].sigma"), [u.sigma])
                && q_ok
                && (u.sigma - 1.0 / self.q).abs() > BUDGET_TOLERANCE
            {
                c.push(Violation::SigmaMismatch {
                    user,
                    sigma: u.sigma,
                    expected: 1.0 / self.q,
                });
            }
            if !c.length(
                format!("users[{user}].appliance_weights"),
                &u.appliance_weights,
                t_len,
            ) {
                continue;
            }
            let first = u.appliance_weights.first().map_or(0, Vec::len);
            for (slot, weights) in u.appliance_weights.iter().enumerate() {
                if weights.is_empty() {
                    c.push(Violation::EmptyApplianceSet { user, slot });
                    continue;
                }
                if weights.len() != first {
                    c.push(Violation::InconsistentApplianceSet {
                        user,
                        slot,
                        first,
                        found: weights.len(),
                    });
                }
                if !c.finite(
                    format!("users[{user}].appliance_weights[{slot}]"),
                    weights.iter().copied(),
                ) {
                    continue;
                }
                for &value in weights {
                    if value < 0.0 {
                        c.push(Violation::NegativeWeight { user, slot, value });
                    }
                }
                let sum: f64 = weights.iter().sum();
                if q_ok && (sum - self.q).abs() > BUDGET_TOLERANCE {
                    c.push(Violation::WeightBudgetMismatch {
                        user,
                        slot,
                        sum,
                        q: self.q,
                    });
                }
            }
            if !u.appliance_names.is_empty() && u.appliance_names.len() != first {
                c.push(Violation::LengthMismatch {
                    field: format!("users[{user}].appliance_names"),
                    expected: first,
                    found: u.appliance_names.len(),
                });
            }
        }

        let sup = &self.supplier;
        if c.length("supplier.kappa", &sup.kappa, t_len)
            && c.finite("supplier.kappa", sup.kappa.iter().copied())
        {
            for (slot, &value) in sup.kappa.iter().enumerate() {
                if value <= 0.0 {
                    c.push(Violation::NonPositiveKappa { slot, value });
                }
            }
        }
        if c.length("supplier.generator_costs", &sup.generator_costs, t_len) {
            for (slot, costs) in sup.generator_costs.iter().enumerate() {
                if costs.is_empty() {
                    c.push(Violation::EmptyGeneratorSet { slot });
                    continue;
                }
                if !c.finite(
                    format!("supplier.generator_costs[{slot}]"),
                    costs.iter().copied(),
                ) {
                    continue;
                }
                for (generator, &value) in costs.iter().enumerate() {
                    if value <= 0.0 {
                        c.push(Violation::NonPositiveDelta {
                            slot,
                            generator,
                            value,
                        });
                    }
                }
            }
        }

        if c.found.is_empty() {
            Ok(())
        } else {
            Err(ValidationError {
                violations: c.found,
            })
        }
    }
}

/// The game after the allocation layer has been solved in closed form.
///
/// Immutable once built; every accessor takes zero-based slot and user indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedScenario {
    scenario: Scenario,
    psi_bar: Vec<Vec<f64>>,
    delta_bar: Vec<f64>,
}

/// Validates `scenario` and computes the reduced coefficients.
pub fn reduce(scenario: &Scenario) -> Result<ReducedScenario, ScenarioError> {
    scenario.check()?;
    let delta_bar = scenario
        .supplier
        .generator_costs
        .iter()
        .map(|costs| allocation::aggregate_generation_cost(costs))
        .collect::<Result<Vec<_>, _>>()?;
    let psi_bar = scenario
        .users
        .iter()
        .map(|u| {
            u.appliance_weights
                .iter()
                .map(|w| allocation::utility_coefficient(w))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReducedScenario {
        scenario: scenario.clone(),
        psi_bar,
        delta_bar,
    })
}

impl ReducedScenario {
    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn slots(&self) -> usize {
        self.scenario.horizon.slots()
    }

    pub fn num_users(&self) -> usize {
        self.scenario.users.len()
    }

    pub fn initial_price(&self) -> f64 {
        self.scenario.price.initial
    }

    pub fn gamma(&self) -> f64 {
        self.scenario.price.gamma
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.scenario.price.omega[t]
    }

    pub fn noise_variance(&self) -> &[f64] {
        &self.scenario.price.noise_variance
    }

    pub fn alpha(&self, user: usize, t: usize) -> f64 {
        self.scenario.users[user].alpha[t]
    }

    pub fn kappa(&self, t: usize) -> f64 {
        self.scenario.supplier.kappa[t]
    }

    pub fn psi_bar(&self, user: usize, t: usize) -> f64 {
        self.psi_bar[user][t]
    }

    pub fn psi_bar_table(&self) -> &[Vec<f64>] {
        &self.psi_bar
    }

    pub fn delta_bar(&self, t: usize) -> f64 {
        self.delta_bar[t]
    }

    pub fn delta_bar_table(&self) -> &[f64] {
        &self.delta_bar
    }

    /// Same reduction with the price stickiness and force coefficient replaced.
    /// Used by tests and sweeps that vary the market law only.
    pub fn with_price(&self, price: PriceParams) -> Result<ReducedScenario, ScenarioError> {
        let mut s = self.scenario.clone();
        s.price = price;
        reduce(&s)
    }

    /// Leader stage cost `0.5 delta_bar s^2 - p s + 0.5 kappa (s - d)^2`.
    pub fn leader_stage_cost(&self, t: usize, supply: f64, total_demand: f64, price: f64) -> f64 {
        0.5 * self.delta_bar[t] * supply * supply - price * supply
            + 0.5 * self.kappa(t) * (supply - total_demand).powi(2)
    }

    /// Follower stage cost `-psi_bar d + p d + 0.5 alpha d^2`.
    pub fn user_stage_cost(&self, user: usize, t: usize, demand: f64, price: f64) -> f64 {
        -self.psi_bar[user][t] * demand + price * demand + 0.5 * self.alpha(user, t) * demand * demand
    }
}


#[cfg(test)]
mod tests {
    use super::testing::uniform;
    use super::*;
    use proptest::prelude::*;

    fn section_four() -> Scenario {
        file::ScenarioFile::from_json_str(include_str!("../../scenarios/eight_users.json"))
            .unwrap()
            .into_scenario()
            .unwrap()
    }

    #[test]
    fn bundled_scenario_is_accepted() {
        let s = validate(section_four()).unwrap();
        assert_eq!(s.num_users(), 8);
        assert_eq!(s.slots(), 20);
        assert_eq!(s.price.gamma, 0.05);
        assert!(s.price.omega.iter().all(|&w| w == -0.05));
        assert!(s.supplier.kappa.iter().all(|&k| k == 0.3));
        assert_eq!(s.price.initial, 1.5);
        assert_eq!(s.q, 5.0);
    }

    #[test]
    fn positive_omega_is_rejected() {
        let mut s = uniform(3, 1.5, -0.05, 0.05, &[0.5], &[vec![5.0]], 5.0, 0.3, &[1.0]);
        s.price.omega[1] = 0.1;
        let err = validate(s).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::NonNegativeOmega { slot: 1, .. })));
    }

    #[test]
    fn weight_budget_mismatch_is_rejected() {
        let s = uniform(2, 1.5, -0.05, 0.05, &[0.5], &[vec![2.0, 2.9]], 5.0, 0.3, &[1.0]);
        let err = validate(s).unwrap_err();
        assert_eq!(err.violations.len(), 2);
        assert!(err
            .violations
            .iter()
            .all(|v| matches!(v, Violation::WeightBudgetMismatch { .. })));
    }

    #[test]
    fn all_violations_are_reported() {
        let mut s = uniform(2, 1.5, -0.05, 0.05, &[0.5], &[vec![5.0]], 5.0, 0.3, &[1.0]);
        s.users[0].alpha[0] = 0.0;
        s.users[0].sigma = 0.3;
        s.price.omega[0] = 0.0;
        let err = validate(s).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::NonPositiveAlpha { user: 0, slot: 0, .. })));
        assert!(err.contains(|v| matches!(v, Violation::SigmaMismatch { .. })));
        assert!(err.contains(|v| matches!(v, Violation::NonNegativeOmega { .. })));
    }

    #[test]
    fn empty_user_set_is_rejected() {
        let s = uniform(2, 1.5, -0.05, 0.05, &[], &[], 5.0, 0.3, &[1.0]);
        let err = validate(s).unwrap_err();
        assert_eq!(err.violations, vec![Violation::EmptyUserSet]);
    }

    #[test]
    fn wrong_lengths_are_rejected() {
        let mut s = uniform(3, 1.5, -0.05, 0.05, &[0.5], &[vec![5.0]], 5.0, 0.3, &[1.0]);
        s.supplier.kappa.pop();
        let err = validate(s).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::LengthMismatch { expected: 3, found: 2, .. })));
    }

    #[test]
    fn horizon_must_be_positive() {
        assert_eq!(Horizon::new(0), Err(Violation::EmptyHorizon));
        assert_eq!(Horizon::new(4).unwrap().slots(), 4);
    }

    #[test]
    fn reduce_three_generators() {
        let s = uniform(1, 1.5, -0.05, 0.05, &[0.5], &[vec![5.0]], 5.0, 0.3, &[1.5, 0.8, 1.0]);
        let r = reduce(&s).unwrap();
        let expected = 1.0 / (1.0 / 1.5 + 1.0 / 0.8 + 1.0);
        assert!((r.delta_bar(0) - expected).abs() < 1e-12);
        assert!((r.delta_bar(0) - 0.342_857_142_857).abs() < 1e-9);
        // single appliance carrying the whole budget: exp(5 ln 5)
        assert!((r.psi_bar(0, 0) - 3125.0).abs() < 1e-9);
    }

    #[test]
    fn reduce_single_generator() {
        let s = uniform(2, 1.5, -0.05, 0.05, &[0.5], &[vec![5.0]], 5.0, 0.3, &[2.0]);
        let r = reduce(&s).unwrap();
        assert_eq!(r.delta_bar_table(), &[2.0, 2.0]);
    }

    #[test]
    fn reduce_is_idempotent() {
        let s = section_four();
        let r1 = reduce(&s).unwrap();
        let r2 = reduce(r1.scenario()).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn reduced_delta_bar_below_cheapest_generator() {
        let r = reduce(&section_four()).unwrap();
        for t in 0..r.slots() {
            assert!(r.delta_bar(t) > 0.0);
            assert!(r.delta_bar(t) <= 0.8);
        }
    }

    proptest! {
        #[test]
        fn delta_bar_scales_linearly(
            deltas in proptest::collection::vec(0.05f64..10.0, 1..6),
            c in 0.01f64..100.0,
        ) {
            let base = uniform(1, 1.0, -0.1, 0.1, &[1.0], &[vec![1.0]], 1.0, 1.0, &deltas);
            let scaled_deltas: Vec<f64> = deltas.iter().map(|d| d * c).collect();
            let scaled = uniform(1, 1.0, -0.1, 0.1, &[1.0], &[vec![1.0]], 1.0, 1.0, &scaled_deltas);
            let a = reduce(&base).unwrap().delta_bar(0);
            let b = reduce(&scaled).unwrap().delta_bar(0);
            prop_assert!((b - c * a).abs() <= 1e-12 * (c * a).max(1.0));
        }
    }
}
