//! Open-loop Stackelberg and Nash equilibria for a sticky-price energy market.
//!
//! One supplier (the leader) announces a supply schedule `s_t`; `N` users
//! (the followers) play an open-loop Nash game over demands `d^i_t` against a
//! price that moves as
//!
//! ```text
//! p_{t+1} = (1 + w_t) p_t + g (sum_i d^i_t - s_t) + eta_t
//! ```
//!
//! Pipeline: [`scenario`] validates and reduces a scenario to the
//! coefficients the solvers need, [`nash`] solves the follower game for a
//! fixed supply, [`stackelberg`] optimizes the supply, and [`cli`] writes
//! trajectories, reports and figures.
//!
//! Slots are zero-based throughout: `t = 0..T`, with the price path carrying
//! one extra terminal entry `p_T`.

pub mod allocation;
pub mod cli;
mod linalg;
pub mod nash;
pub mod price;
pub mod scenario;
pub mod stackelberg;

use serde::{Deserialize, Serialize};

pub use linalg::{LinalgError, RESIDUAL_TOLERANCE};
pub use nash::{NashError, NashMethod, NashSolution};
pub use price::PricePath;
pub use scenario::{reduce, validate, ReducedScenario, Scenario};
pub use stackelberg::{StackelbergError, StackelbergSolution};

/// Which form of the follower recursion and the KKT conditions to use.
///
/// `Derived` is re-derived from the first-order conditions and is exact.
/// `Literal` transcribes the commonly printed formulas, which contain index
/// and factor slips; it exists for side-by-side comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Derived,
    Literal,
}
