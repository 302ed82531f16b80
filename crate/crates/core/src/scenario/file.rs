//! Scenario file format.
//!
//! A scenario is a JSON document:
//!
//! ```json
//! {
//!   "horizon": 20,
//!   "q": 5.0,
//!   "price": { "initial": 1.5, "omega": -0.05, "gamma": 0.05, "noise_variance": 0.01 },
//!   "users": [
//!     { "name": "house-1", "alpha": 0.5,
//!       "appliances": [ { "name": "refrigerator", "daily_usage": 1.32 },
//!                       { "name": "stove", "daily_usage": 7.89 } ] },
//!     { "alpha": [0.6, 0.6, 0.7], "sigma": 0.2, "appliance_weights": [2.5, 2.5] }
//!   ],
//!   "supplier": { "kappa": 0.3, "generator_costs": [1.5, 0.8, 1.0] },
//!   "supply": 40.0
//! }
//! ```
//!
//! Every per-slot quantity accepts either a scalar (broadcast over the
//! horizon) or an array with one entry per slot. Per-slot vectors
//! (`appliance_weights`, `generator_costs`) accept a single vector or an
//! array of vectors, one per slot.
//!
//! A user gives either `appliance_weights` directly or `appliances` with
//! daily usages; in the latter case the weights are the usages rescaled to
//! sum to `q`. `sigma` defaults to `1/q`. `noise_variance` defaults to 0.
//! `supply` is optional and only read by the fixed-supply follower solve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Horizon, PriceParams, Scenario, SupplierParams, UserParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSlot {
    Constant(f64),
    Series(Vec<f64>),
}

impl PerSlot {
    pub fn expand(&self, slots: usize) -> Vec<f64> {
        match self {
            PerSlot::Constant(x) => vec![*x; slots],
            PerSlot::Series(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerSlotVector {
    Constant(Vec<f64>),
    Series(Vec<Vec<f64>>),
}

impl PerSlotVector {
    pub fn expand(&self, slots: usize) -> Vec<Vec<f64>> {
        match self {
            PerSlotVector::Constant(v) => vec![v.clone(); slots],
            PerSlotVector::Series(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    #[serde(alias = "p1")]
    pub initial: f64,
    pub omega: PerSlot,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_variance: Option<PerSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceUsage {
    pub name: String,
    /// Daily energy usage (kWh) used to derive the weight.
    pub daily_usage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub alpha: PerSlot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appliance_weights: Option<PerSlotVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appliances: Option<Vec<ApplianceUsage>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplierSection {
    pub kappa: PerSlot,
    pub generator_costs: PerSlotVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub horizon: usize,
    pub q: f64,
    pub price: PriceSection,
    pub users: Vec<UserSection>,
    pub supplier: SupplierSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supply: Option<PerSlot>,
}

#[derive(Debug, Error)]
pub enum FileError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

impl ScenarioFile {
    pub fn from_json_str(text: &str) -> Result<Self, FileError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Expands broadcast fields. Invariants are checked by [`super::validate`].
    pub fn into_scenario(self) -> Result<Scenario, FileError> {
        let slots = self.horizon;
        let horizon = Horizon::new(slots).map_err(|e| FileError::Field {
            path: "horizon".into(),
            message: e.to_string(),
        })?;
        let q = self.q;
        let users = self
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| user_params(i, u, slots, q))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scenario {
            horizon,
            price: PriceParams {
                initial: self.price.initial,
                omega: self.price.omega.expand(slots),
                gamma: self.price.gamma,
                noise_variance: self
                    .price
                    .noise_variance
                    .as_ref()
                    .map_or_else(|| vec![0.0; slots], |v| v.expand(slots)),
            },
            users,
            supplier: SupplierParams {
                kappa: self.supplier.kappa.expand(slots),
                generator_costs: self.supplier.generator_costs.expand(slots),
            },
            q,
        })
    }

    /// Fixed supply schedule, if the file carries one.
    pub fn supply(&self) -> Option<Vec<f64>> {
        self.supply.as_ref().map(|s| s.expand(self.horizon))
    }
}

fn user_params(index: usize, u: &UserSection, slots: usize, q: f64) -> Result<UserParams, FileError> {
    let path = |field: &str| format!("users[{index}].{field}");
    let (weights, names) = match (&u.appliance_weights, &u.appliances) {
        (Some(w), None) => (w.expand(slots), Vec::new()),
        (None, Some(apps)) => {
            if apps.is_empty() {
                return Err(FileError::Field {
                    path: path("appliances"),
                    message: "appliance list is empty".into(),
                });
            }
            let total: f64 = apps.iter().map(|a| a.daily_usage).sum();
            if !(total > 0.0) || apps.iter().any(|a| !(a.daily_usage >= 0.0)) {
                return Err(FileError::Field {
                    path: path("appliances"),
                    message: "daily usages must be nonnegative with a positive total".into(),
                });
            }
            let w: Vec<f64> = apps.iter().map(|a| q * a.daily_usage / total).collect();
            (vec![w; slots], apps.iter().map(|a| a.name.clone()).collect())
        }
        (Some(_), Some(_)) => {
            return Err(FileError::Field {
                path: path("appliances"),
                message: "give either appliance_weights or appliances, not both".into(),
            })
        }
        (None, None) => {
            return Err(FileError::Field {
                path: path("appliance_weights"),
                message: "missing appliance_weights (or appliances)".into(),
            })
        }
    };
    Ok(UserParams {
        name: u.name.clone(),
        alpha: u.alpha.expand(slots),
        sigma: u.sigma.unwrap_or(1.0 / q),
        appliance_weights: weights,
        appliance_names: names,
    })
}
