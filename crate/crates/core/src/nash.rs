//! Followers' open-loop Nash equilibrium for an announced supply schedule.
//!
//! Three solvers compute the same object:
//!
//! * [`solve_tpbv`] stacks the necessary conditions of every user's optimal
//!   control problem and solves the square linear system directly. This is
//!   the reference the other two are checked against.
//! * [`solve_closed_form`] runs the backward coefficient recursion for the
//!   affine costate ansatz `lambda_t = q_t p_t + b_t`, then a forward pass.
//! * [`solve_best_response`] iterates exact per-user best responses with the
//!   price eliminated, projecting onto `d >= 0`.
//!
//! # Conditions
//!
//! With zero-based slots `t = 0..T`, prices `p_0..p_T` and costates
//! `lambda_0..lambda_T` (`lambda_T = 0`), an interior equilibrium satisfies
//!
//! ```text
//! p_{t+1}  = (1 + w_t) p_t + g (sum_i d^i_t - s_t)                 state
//! d^i_t    = (psi^i_t - p_t - g lambda^i_{t+1}) / a^i_t            stationarity
//! lambda^i_t = (1 + w_t) lambda^i_{t+1} + d^i_t                    costate
//! ```
//!
//! # Coefficient recursion
//!
//! Substituting the ansatz and writing `A = sum_j 1/a^j_t`,
//! `Q = sum_j q^j_{t+1}/a^j_t`, `P = sum_j psi^j_t/a^j_t`,
//! `B = sum_j b^j_{t+1}/a^j_t`, `D = 1 + g^2 Q`, `m^i = 1 + w_t - g/a^i_t`:
//!
//! ```text
//! q^i_t = m^i (1 + w_t - g A) q^i_{t+1} / D - 1/a^i_t
//! b^i_t = m^i b^i_{t+1} + psi^i_t/a^i_t + m^i q^i_{t+1} g (P - s_t - g B) / D
//! d^i_t = [(1 + w_t)(psi^i_t - p_t) - g (q^i_t p_t + b^i_t)] / (a^i_t (1 + w_t) - g)
//! ```
//!
//! The `q` recursion is the widely quoted one. The commonly printed `b`
//! recursion has `1 + w_t - 1/a^i_t` in place of `m^i` and drops the
//! `m^i q^i_{t+1}` factor on the last term; the commonly printed demand
//! formula is also garbled. Both printed forms are kept as
//! [`Variant::Literal`](crate::Variant::Literal) for comparison. They do not
//! satisfy the stationarity conditions; the default
//! [`Variant::Derived`](crate::Variant::Derived) does and agrees with
//! [`solve_tpbv`] to round-off.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::price::{self, max_abs_diff, PricePath};
use crate::scenario::ReducedScenario;
use crate::Variant;

/// Denominators below this magnitude are treated as singular.
pub const DENOMINATOR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NashMethod {
    ClosedForm,
    Tpbv,
    BestResponse,
}

/// `q[i][t]`, `b[i][t]` for `t = 0..=T`, terminal column zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecursionCoefficients {
    pub q: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashSolution {
    /// `demands[i][t]`
    pub demands: Vec<Vec<f64>>,
    pub price: PricePath,
    /// `costates[i][t]` for `t = 0..=T`, `costates[i][T] = 0`.
    pub costates: Vec<Vec<f64>>,
    pub coefficients: Option<RecursionCoefficients>,
    /// True iff every demand is strictly positive.
    pub interior: bool,
    pub method: NashMethod,
    /// Best-response sweeps until the iterate stopped moving.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Final relaxation factor of the best-response iteration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaxation: Option<f64>,
}

impl NashSolution {
    pub fn total_demand(&self, t: usize) -> f64 {
        price::total_demand(&self.demands, t)
    }

    pub fn total_demands(&self) -> Vec<f64> {
        (0..self.price.len() - 1).map(|t| self.total_demand(t)).collect()
    }

    pub fn max_demand_gap(&self, other: &NashSolution) -> f64 {
        self.demands
            .iter()
            .zip(&other.demands)
            .map(|(a, b)| max_abs_diff(a, b))
            .fold(0.0, f64::max)
    }

    /// `(user, slot)` pairs with non-positive demand.
    pub fn nonpositive_demands(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, row) in self.demands.iter().enumerate() {
            for (t, &d) in row.iter().enumerate() {
                if d <= 0.0 {
                    out.push((i, t));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NashError {
    #[error("singular recursion at slot {slot}: {what} = {value:.3e}")]
    SingularRecursion {
        slot: usize,
        what: &'static str,
        value: f64,
    },
    #[error("boundary-value system is singular: {0}")]
    SingularSystem(#[from] LinalgError),
    #[error("best response did not converge in {iterations} sweeps (last change {residual:.3e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        last: Box<NashSolution>,
    },
    #[error("user {user}: own-cost Hessian is not positive definite")]
    NonConvexSubproblem { user: usize },
    #[error("supply has {found} entries, horizon is {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

fn check_supply(reduced: &ReducedScenario, supply: &[f64]) -> Result<(), NashError> {
    if supply.len() != reduced.slots() {
        return Err(NashError::DimensionMismatch {
            expected: reduced.slots(),
            found: supply.len(),
        });
    }
    Ok(())
}

fn nonsingular(slot: usize, what: &'static str, value: f64) -> Result<f64, NashError> {
    if value.abs() < DENOMINATOR_TOLERANCE || !value.is_finite() {
        Err(NashError::SingularRecursion { slot, what, value })
    } else {
        Ok(value)
    }
}

/// `1 + g^2 sum_j q^j_{t+1} / a^j_t` for slot `t`.
pub(crate) fn coupling_denominator(reduced: &ReducedScenario, q: &[Vec<f64>], t: usize) -> Result<f64, NashError> {
    let g = reduced.gamma();
    let sum: f64 = (0..reduced.num_users()).map(|j| q[j][t + 1] / reduced.alpha(j, t)).sum();
    nonsingular(t, "1 + gamma^2 sum q/alpha", 1.0 + g * g * sum)
}

/// Supply-independent price coefficients `q[i][t]` of the costate ansatz.
pub fn price_coefficients(reduced: &ReducedScenario) -> Result<Vec<Vec<f64>>, NashError> {
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    let mut q = vec![vec![0.0; slots + 1]; n];
    for t in (0..slots).rev() {
        let den = coupling_denominator(reduced, &q, t)?;
        let w1 = 1.0 + reduced.omega(t);
        let inv_alpha_sum: f64 = (0..n).map(|j| 1.0 / reduced.alpha(j, t)).sum();
        for i in 0..n {
            let a = reduced.alpha(i, t);
            q[i][t] = (w1 - g / a) * (w1 - g * inv_alpha_sum) * q[i][t + 1] / den - 1.0 / a;
        }
    }
    Ok(q)
}

pub fn backward_coefficients(reduced: &ReducedScenario, supply: &[f64]) -> Result<RecursionCoefficients, NashError> {
    backward_coefficients_with(reduced, supply, Variant::Derived)
}

pub fn backward_coefficients_with(
    reduced: &ReducedScenario,
    supply: &[f64],
    variant: Variant,
) -> Result<RecursionCoefficients, NashError> {
    check_supply(reduced, supply)?;
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    let q = price_coefficients(reduced)?;
    let mut b = vec![vec![0.0; slots + 1]; n];
    for t in (0..slots).rev() {
        let den = coupling_denominator(reduced, &q, t)?;
        let w1 = 1.0 + reduced.omega(t);
        let psi_sum: f64 = (0..n).map(|j| reduced.psi_bar(j, t) / reduced.alpha(j, t)).sum();
        let b_sum: f64 = (0..n).map(|j| b[j][t + 1] / reduced.alpha(j, t)).sum();
        let forcing = g * (psi_sum - supply[t] - g * b_sum) / den;
        for i in 0..n {
            let a = reduced.alpha(i, t);
            let own = reduced.psi_bar(i, t) / a;
            b[i][t] = match variant {
                Variant::Derived => {
                    let m = w1 - g / a;
                    m * b[i][t + 1] + own + m * q[i][t + 1] * forcing
                }
                Variant::Literal => (w1 - 1.0 / a) * b[i][t + 1] + own + forcing,
            };
        }
    }
    Ok(RecursionCoefficients { q, b })
}

fn costates_from_demands(reduced: &ReducedScenario, demands: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let slots = reduced.slots();
    demands
        .iter()
        .map(|row| {
            let mut lam = vec![0.0; slots + 1];
            for t in (0..slots).rev() {
                lam[t] = (1.0 + reduced.omega(t)) * lam[t + 1] + row[t];
            }
            lam
        })
        .collect()
}

fn is_interior(demands: &[Vec<f64>]) -> bool {
    demands.iter().flatten().all(|&d| d > 0.0)
}

pub fn solve_closed_form(reduced: &ReducedScenario, supply: &[f64]) -> Result<NashSolution, NashError> {
    solve_closed_form_with(reduced, supply, Variant::Derived)
}

pub fn solve_closed_form_with(
    reduced: &ReducedScenario,
    supply: &[f64],
    variant: Variant,
) -> Result<NashSolution, NashError> {
    let coeffs = backward_coefficients_with(reduced, supply, variant)?;
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    let mut demands = vec![vec![0.0; slots]; n];
    let mut p = Vec::with_capacity(slots + 1);
    p.push(reduced.initial_price());
    for t in 0..slots {
        let w1 = 1.0 + reduced.omega(t);
        let pt = p[t];
        match variant {
            Variant::Derived => {
                // Closed-loop price first; the demand formula in the module
                // docs is the same quantity but divides by a(1+w) - g.
                let den = coupling_denominator(reduced, &coeffs.q, t)?;
                let sum = |f: &dyn Fn(usize) -> f64| (0..n).map(|j| f(j) / reduced.alpha(j, t)).sum::<f64>();
                let inv_alpha = sum(&|_| 1.0);
                let psi_sum = sum(&|j| reduced.psi_bar(j, t));
                let b_sum = sum(&|j| coeffs.b[j][t + 1]);
                let next = ((w1 - g * inv_alpha) * pt + g * (psi_sum - supply[t] - g * b_sum)) / den;
                for i in 0..n {
                    let lam_next = coeffs.q[i][t + 1] * next + coeffs.b[i][t + 1];
                    demands[i][t] = (reduced.psi_bar(i, t) - pt - g * lam_next) / reduced.alpha(i, t);
                }
            }
            Variant::Literal => {
                for i in 0..n {
                    let a = reduced.alpha(i, t);
                    let psi = reduced.psi_bar(i, t);
                    let (q, b) = (coeffs.q[i][t], coeffs.b[i][t]);
                    let c = nonsingular(t, "alpha (1 + omega) - gamma", a * w1 - g)?;
                    demands[i][t] = ((q - 1.0) / c - 1.0) * pt / a + (psi / a) * (1.0 / c + 1.0) + b / (a * c);
                }
            }
        }
        let d = price::total_demand(&demands, t);
        p.push(price::step(pt, reduced.omega(t), g, d, supply[t], 0.0));
    }
    let costates = (0..n)
        .map(|i| {
            let mut lam: Vec<f64> = (0..slots).map(|t| coeffs.q[i][t] * p[t] + coeffs.b[i][t]).collect();
            lam.push(0.0);
            lam
        })
        .collect();
    Ok(NashSolution {
        interior: is_interior(&demands),
        demands,
        price: PricePath::new(p),
        costates,
        coefficients: Some(coeffs),
        method: NashMethod::ClosedForm,
        iterations: None,
        relaxation: None,
    })
}

/// Direct solve of the stacked state/stationarity/costate conditions.
///
/// Unknowns are `d[i][t]`, `lambda[i][t]` for `t = 0..T` and `p_1..p_T`
/// (`2NT + T` in total). A returned solution with `interior == false` means
/// the clamp `d >= 0` would bind and the linear conditions no longer describe
/// the equilibrium.
pub fn solve_tpbv(reduced: &ReducedScenario, supply: &[f64]) -> Result<NashSolution, NashError> {
    check_supply(reduced, supply)?;
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    let nt = n * slots;
    let size = 2 * nt + slots;
    let d_idx = |i: usize, t: usize| i * slots + t;
    let l_idx = |i: usize, t: usize| nt + i * slots + t;
    // p_{t+1} for t = 0..T
    let p_idx = |t: usize| 2 * nt + t;
    let p0 = reduced.initial_price();

    let mut a = DMatrix::zeros(size, size);
    let mut rhs = DVector::zeros(size);
    let mut row = 0;
    for t in 0..slots {
        let w1 = 1.0 + reduced.omega(t);
        a[(row, p_idx(t))] = 1.0;
        if t == 0 {
            rhs[row] += w1 * p0;
        } else {
            a[(row, p_idx(t - 1))] = -w1;
        }
        for i in 0..n {
            a[(row, d_idx(i, t))] = -g;
        }
        rhs[row] -= g * supply[t];
        row += 1;
    }
    for i in 0..n {
        for t in 0..slots {
            let w1 = 1.0 + reduced.omega(t);
            a[(row, d_idx(i, t))] = reduced.alpha(i, t);
            if t == 0 {
                rhs[row] -= p0;
            } else {
                a[(row, p_idx(t - 1))] = 1.0;
            }
            if t + 1 < slots {
                a[(row, l_idx(i, t + 1))] = g;
            }
            rhs[row] += reduced.psi_bar(i, t);
            row += 1;

            a[(row, l_idx(i, t))] = 1.0;
            if t + 1 < slots {
                a[(row, l_idx(i, t + 1))] = -w1;
            }
            a[(row, d_idx(i, t))] = -1.0;
            row += 1;
        }
    }
    debug_assert_eq!(row, size);
    let x = linalg::solve(a, &rhs)?;

    let demands: Vec<Vec<f64>> = (0..n).map(|i| (0..slots).map(|t| x[d_idx(i, t)]).collect()).collect();
    let costates = (0..n)
        .map(|i| {
            let mut lam: Vec<f64> = (0..slots).map(|t| x[l_idx(i, t)]).collect();
            lam.push(0.0);
            lam
        })
        .collect();
    let mut p = vec![p0];
    p.extend((0..slots).map(|t| x[p_idx(t)]));
    Ok(NashSolution {
        interior: is_interior(&demands),
        demands,
        price: PricePath::new(p),
        costates,
        coefficients: None,
        method: NashMethod::Tpbv,
        iterations: None,
        relaxation: None,
    })
}

/// Affine price map `p_t = offset_t + sum_tau response[t][tau] (D_tau - s_tau)`
/// for `t = 0..T` (slot prices only, the terminal price is not priced in).
#[derive(Debug, Clone)]
pub(crate) struct PriceMap {
    pub offset: DVector<f64>,
    pub response: DMatrix<f64>,
}

impl PriceMap {
    pub fn new(reduced: &ReducedScenario) -> Self {
        let slots = reduced.slots();
        let mut offset = DVector::zeros(slots);
        let mut response = DMatrix::zeros(slots, slots);
        let mut p = reduced.initial_price();
        for t in 0..slots {
            offset[t] = p;
            p *= 1.0 + reduced.omega(t);
        }
        for tau in 0..slots {
            let mut v = reduced.gamma();
            for t in tau + 1..slots {
                response[(t, tau)] = v;
                v *= 1.0 + reduced.omega(t);
            }
        }
        PriceMap { offset, response }
    }
}

/// Cost of `user` playing `demand` against the price path `price`.
pub fn follower_cost(reduced: &ReducedScenario, user: usize, demand: &[f64], price: &[f64]) -> f64 {
    demand
        .iter()
        .enumerate()
        .map(|(t, &d)| reduced.user_stage_cost(user, t, d, price[t]))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestResponseOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for BestResponseOptions {
    fn default() -> Self {
        BestResponseOptions {
            max_iters: 20_000,
            tol: 1e-10,
        }
    }
}

const MIN_RELAXATION: f64 = 1.0 / 64.0;

struct UserProblem {
    hessian: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    psi: DVector<f64>,
}

impl UserProblem {
    /// Minimizes `0.5 x'Hx + c'x` over `x >= 0`.
    fn solve(&self, c: &DVector<f64>, warm: &[f64]) -> Vec<f64> {
        let x = self.chol.solve(&(-c));
        if x.iter().all(|&v| v >= 0.0) {
            return x.iter().copied().collect();
        }
        // Projected coordinate descent; exact per-coordinate minimization.
        let h = &self.hessian;
        let n = x.len();
        let mut y: Vec<f64> = warm.iter().map(|v| v.max(0.0)).collect();
        let mut grad: Vec<f64> = (0..n).map(|k| c[k] + (0..n).map(|j| h[(k, j)] * y[j]).sum::<f64>()).collect();
        for _ in 0..100_000 {
            let mut moved = 0.0f64;
            for k in 0..n {
                let new = (y[k] - grad[k] / h[(k, k)]).max(0.0);
                let delta = new - y[k];
                if delta != 0.0 {
                    for j in 0..n {
                        grad[j] += h[(j, k)] * delta;
                    }
                    y[k] = new;
                    moved = moved.max(delta.abs());
                }
            }
            if moved < 1e-15 * (1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                break;
            }
        }
        y
    }
}

/// Relaxed Gauss-Seidel best-response iteration.
///
/// Each user in turn minimizes their own cost over `d >= 0` with the others'
/// demands fixed and the price substituted out. The update is
/// `d <- (1 - beta) d + beta BR(d)`; `beta` starts at 1 and halves whenever
/// the sweep-to-sweep change grows, which tames the price coupling when many
/// users share a market.
pub fn solve_best_response(
    reduced: &ReducedScenario,
    supply: &[f64],
    options: BestResponseOptions,
) -> Result<NashSolution, NashError> {
    solve_best_response_from(reduced, supply, options, None)
}

pub(crate) fn solve_best_response_from(
    reduced: &ReducedScenario,
    supply: &[f64],
    options: BestResponseOptions,
    warm: Option<&[Vec<f64>]>,
) -> Result<NashSolution, NashError> {
    check_supply(reduced, supply)?;
    let (n, slots) = (reduced.num_users(), reduced.slots());
    let map = PriceMap::new(reduced);
    let g = &map.response;
    let sym = g + g.transpose();
    let problems = (0..n)
        .map(|i| {
            let mut h = sym.clone();
            for t in 0..slots {
                h[(t, t)] += reduced.alpha(i, t);
            }
            let chol = h.clone().cholesky().ok_or(NashError::NonConvexSubproblem { user: i })?;
            let psi = DVector::from_iterator(slots, (0..slots).map(|t| reduced.psi_bar(i, t)));
            Ok(UserProblem { hessian: h, chol, psi })
        })
        .collect::<Result<Vec<_>, NashError>>()?;
    let s = DVector::from_column_slice(supply);

    let mut d: Vec<Vec<f64>> = warm.map_or_else(|| vec![vec![0.0; slots]; n], |w| w.to_vec());
    let mut total = DVector::from_iterator(slots, (0..slots).map(|t| price::total_demand(&d, t)));
    let mut beta = 1.0;
    let mut prev_change = f64::INFINITY;
    let mut converged_at = None;
    let mut last_change = f64::INFINITY;
    for sweep in 1..=options.max_iters.max(1) {
        let mut change = 0.0f64;
        for (i, prob) in problems.iter().enumerate() {
            let own = DVector::from_column_slice(&d[i]);
            let others = &total - &own;
            let c = &map.offset - &prob.psi + g * (others - &s);
            let br = prob.solve(&c, &d[i]);
            for t in 0..slots {
                let new = (1.0 - beta) * d[i][t] + beta * br[t];
                change = change.max((new - d[i][t]).abs());
                total[t] += new - d[i][t];
                d[i][t] = new;
            }
        }
        last_change = change;
        let scale = 1.0 + d.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if change < options.tol * scale {
            converged_at = Some((sweep - 1).max(1));
            break;
        }
        if change > prev_change && beta > MIN_RELAXATION {
            beta = (beta * 0.5).max(MIN_RELAXATION);
        }
        prev_change = change;
    }
    for row in d.iter_mut() {
        for v in row.iter_mut() {
            // a projected coordinate can come back as -0.0
            if *v == 0.0 {
                *v = 0.0;
            }
        }
    }
    let price = price::roll_deterministic(reduced, &d, supply).expect("dimensions checked");
    let sol = NashSolution {
        interior: is_interior(&d),
        costates: costates_from_demands(reduced, &d),
        demands: d,
        price,
        coefficients: None,
        method: NashMethod::BestResponse,
        iterations: converged_at.or(Some(options.max_iters)),
        relaxation: Some(beta),
    };
    match converged_at {
        Some(_) => Ok(sol),
        None => Err(NashError::NoConvergence {
            iterations: options.max_iters,
            residual: last_change,
            last: Box::new(sol),
        }),
    }
}

/// Max-abs residual of the stationarity conditions (clamp ignored) and of the
/// costate recursion, for a follower solution.
pub fn stationarity_residual(reduced: &ReducedScenario, sol: &NashSolution) -> f64 {
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    let mut worst = 0.0f64;
    for i in 0..n {
        for t in 0..slots {
            let lam_next = sol.costates[i][t + 1];
            let stat = reduced.alpha(i, t) * sol.demands[i][t] - (reduced.psi_bar(i, t) - sol.price[t] - g * lam_next);
            let co = sol.costates[i][t] - (1.0 + reduced.omega(t)) * lam_next - sol.demands[i][t];
            worst = worst.max(stat.abs()).max(co.abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{reduce, testing::uniform, PriceParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One-appliance users: psi_bar = q^q.
    fn simple(slots: usize, p1: f64, omega: f64, gamma: f64, alphas: &[f64], q: f64) -> ReducedScenario {
        let weights = vec![vec![q]; alphas.len()];
        reduce(&uniform(slots, p1, omega, gamma, alphas, &weights, q, 0.3, &[1.0])).unwrap()
    }

    fn section_four() -> ReducedScenario {
        let f = crate::scenario::file::ScenarioFile::from_json_str(include_str!("../scenarios/eight_users.json")).unwrap();
        reduce(&f.into_scenario().unwrap()).unwrap()
    }

    #[test]
    fn terminal_coefficients() {
        let r = simple(4, 1.5, -0.05, 0.05, &[0.5, 0.7], 2.0);
        let s = [1.0, 2.0, 3.0, 4.0];
        let derived = backward_coefficients(&r, &s).unwrap();
        let literal = backward_coefficients_with(&r, &s, Variant::Literal).unwrap();
        let last = 3;
        for i in 0..2 {
            let a = r.alpha(i, last);
            assert_eq!(derived.q[i][4], 0.0);
            assert_eq!(derived.b[i][4], 0.0);
            assert!((derived.q[i][last] + 1.0 / a).abs() < 1e-15);
            // terminal costate is the last demand: b_T = psi/alpha
            assert!((derived.b[i][last] - r.psi_bar(i, last) / a).abs() < 1e-12);
            let psi_sum: f64 = (0..2).map(|j| r.psi_bar(j, last) / r.alpha(j, last)).sum();
            let printed = r.psi_bar(i, last) / a + r.gamma() * (psi_sum - s[last]);
            assert!((literal.b[i][last] - printed).abs() < 1e-12);
        }
        assert_eq!(derived.q, literal.q);
    }

    #[test]
    fn single_user_single_slot() {
        let r = simple(1, 1.5, -0.05, 0.05, &[0.8], 2.0);
        let psi = r.psi_bar(0, 0);
        let expected = (psi - 1.5) / 0.8;
        for sol in [
            solve_closed_form(&r, &[3.0]).unwrap(),
            solve_tpbv(&r, &[3.0]).unwrap(),
            solve_best_response(&r, &[3.0], BestResponseOptions::default()).unwrap(),
        ] {
            assert!((sol.demands[0][0] - expected).abs() < 1e-12, "{:?}", sol.method);
            assert!(sol.interior);
            assert_eq!(sol.costates[0][1], 0.0);
        }
    }

    #[test]
    fn tpbv_hand_example() {
        // alpha = 1, omega = -0.5, gamma = 0.5, psi_bar = 10, s = 0, p1 = 1:
        // d1 = 17/3, d2 = 20/3, p2 = 10/3, p3 = 5, lambda1 = 9, lambda2 = 20/3.
        let r = reduced_with_psi(2, 1.0, -0.5, 0.5, 1.0, 10.0);
        let sol = solve_tpbv(&r, &[0.0, 0.0]).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-10;
        assert!(close(sol.demands[0][0], 17.0 / 3.0));
        assert!(close(sol.demands[0][1], 20.0 / 3.0));
        assert!(close(sol.price[1], 10.0 / 3.0));
        assert!(close(sol.price[2], 5.0));
        assert!(close(sol.costates[0][0], 9.0));
        assert!(close(sol.costates[0][1], 20.0 / 3.0));
        let cf = solve_closed_form(&r, &[0.0, 0.0]).unwrap();
        assert!(cf.max_demand_gap(&sol) < 1e-10);
    }

    #[test]
    fn singular_hand_example_is_reported() {
        // gamma = 1 makes 1 + gamma^2 q_2 / alpha vanish and the conditions inconsistent
        let r = reduced_with_psi(2, 1.0, -0.5, 1.0, 1.0, 10.0);
        assert!(matches!(
            solve_closed_form(&r, &[0.0, 0.0]),
            Err(NashError::SingularRecursion { slot: 0, .. })
        ));
        assert!(matches!(solve_tpbv(&r, &[0.0, 0.0]), Err(NashError::SingularSystem(_))));
    }

    /// Single user, two equal appliances chosen so psi_bar hits `target`.
    pub(crate) fn reduced_with_psi(slots: usize, alpha: f64, omega: f64, gamma: f64, p1: f64, target: f64) -> ReducedScenario {
        // psi_bar = exp(q ln(q/2)) for two weights q/2; solve for q by bisection
        let f = |q: f64| q * (q / 2.0).ln() - target.ln();
        let (mut lo, mut hi) = (2.0f64, 20.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let q = 0.5 * (lo + hi);
        let r = reduce(&uniform(slots, p1, omega, gamma, &[alpha], &[vec![q / 2.0, q / 2.0]], q, 0.3, &[1.0])).unwrap();
        assert!((r.psi_bar(0, 0) - target).abs() < 1e-9);
        r
    }

    #[test]
    fn zero_utility_gives_negative_demand() {
        // psi_bar = exp(0) = 1 is the smallest reachable; with p1 far above it demand turns negative
        let r = reduce(&uniform(3, 50.0, -0.05, 0.05, &[0.5], &[vec![1.0; 5]], 5.0, 0.3, &[1.0])).unwrap();
        let sol = solve_tpbv(&r, &[0.0; 3]).unwrap();
        assert!(!sol.interior);
        assert!(sol.demands[0].iter().all(|&d| d < 0.0));
        assert_eq!(sol.nonpositive_demands().len(), 3);
    }

    #[test]
    fn literal_variant_misses_stationarity() {
        let r = simple(4, 1.5, -0.05, 0.05, &[0.5, 0.7], 2.0);
        let s = [1.0; 4];
        let derived = solve_closed_form(&r, &s).unwrap();
        let literal = solve_closed_form_with(&r, &s, Variant::Literal).unwrap();
        assert!(stationarity_residual(&r, &derived) < 1e-10);
        assert!(stationarity_residual(&r, &literal) > 1e-3);
    }

    #[test]
    fn section_four_three_solvers_agree() {
        let r = section_four();
        let supply = vec![40.0; 20];
        let cf = solve_closed_form(&r, &supply).unwrap();
        let tp = solve_tpbv(&r, &supply).unwrap();
        let br = solve_best_response(&r, &supply, BestResponseOptions { max_iters: 20_000, tol: 1e-12 }).unwrap();
        assert!(cf.interior && tp.interior && br.interior);
        assert!(cf.max_demand_gap(&tp) < 1e-8);
        assert!(br.max_demand_gap(&tp) < 1e-7, "{}", br.max_demand_gap(&tp));
        assert!(cf.price.max_abs_diff(&tp.price) < 1e-8);
        assert!(br.iterations.unwrap() > 1);
        assert!(br.relaxation.unwrap() < 1.0);
    }

    #[test]
    fn single_user_best_response_needs_one_sweep() {
        let r = simple(5, 1.5, -0.1, 0.05, &[0.6], 3.0);
        let sol = solve_best_response(&r, &[2.0; 5], BestResponseOptions::default()).unwrap();
        assert_eq!(sol.iterations, Some(1));
        assert_eq!(sol.relaxation, Some(1.0));
    }

    #[test]
    fn more_supply_lowers_later_prices() {
        let r = section_four();
        let base = solve_closed_form(&r, &vec![40.0; 20]).unwrap();
        let up = solve_closed_form(&r, &vec![41.0; 20]).unwrap();
        assert_eq!(base.price[0], up.price[0]);
        for t in 1..=20 {
            assert!(up.price[t] < base.price[t], "slot {t}");
        }
    }

    #[test]
    fn best_response_projects_onto_nonnegative_demands() {
        let r = reduce(&uniform(3, 50.0, -0.05, 0.05, &[0.5, 0.6], &[vec![1.0; 5], vec![5.0]], 5.0, 0.3, &[1.0])).unwrap();
        let sol = solve_best_response(&r, &[0.0; 3], BestResponseOptions::default()).unwrap();
        assert!(sol.demands.iter().flatten().all(|&d| d >= 0.0));
        assert!(!sol.interior);
        // each user's demand is a best response: no feasible single-coordinate move helps
        for i in 0..2 {
            let base = follower_cost(&r, i, &sol.demands[i], sol.price.as_slice());
            for t in 0..3 {
                for eps in [1e-4, -1e-4] {
                    let mut d = sol.demands.clone();
                    d[i][t] = (d[i][t] + eps).max(0.0);
                    let p = price::roll_deterministic(&r, &d, &[0.0; 3]).unwrap();
                    assert!(follower_cost(&r, i, &d[i], p.as_slice()) >= base - 1e-10);
                }
            }
        }
    }

    #[test]
    fn max_iters_exhaustion_is_reported() {
        let r = section_four();
        match solve_best_response(&r, &vec![40.0; 20], BestResponseOptions { max_iters: 3, tol: 1e-12 }) {
            Err(NashError::NoConvergence { iterations: 3, last, .. }) => assert_eq!(last.demands.len(), 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn supply_length_is_checked() {
        let r = simple(3, 1.5, -0.05, 0.05, &[0.5], 2.0);
        assert!(matches!(solve_closed_form(&r, &[1.0]), Err(NashError::DimensionMismatch { .. })));
        assert!(matches!(solve_tpbv(&r, &[1.0]), Err(NashError::DimensionMismatch { .. })));
    }

    #[test]
    fn unilateral_deviations_do_not_help() {
        let r = section_four();
        let supply = vec![40.0; 20];
        let sol = solve_closed_form(&r, &supply).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let i = rng.random_range(0..8);
            let dir: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut d = sol.demands.clone();
            for t in 0..20 {
                d[i][t] += 1e-3 * dir[t] / norm;
            }
            let p = price::roll_deterministic(&r, &d, &supply).unwrap();
            let base = follower_cost(&r, i, &sol.demands[i], sol.price.as_slice());
            assert!(follower_cost(&r, i, &d[i], p.as_slice()) >= base - 1e-8);
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (ReducedScenario, Vec<f64>) {
        let n = rng.random_range(1..=4);
        let slots = rng.random_range(1..=6);
        let q = 4.0;
        let alphas: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w = rng.random_range(0.5..3.5);
                vec![w, q - w]
            })
            .collect();
        let mut s = uniform(slots, rng.random_range(0.5..2.0), -0.1, 0.02, &alphas, &weights, q, 0.3, &[1.0]);
        s.price = PriceParams {
            omega: (0..slots).map(|_| rng.random_range(-0.3..-0.01)).collect(),
            gamma: rng.random_range(0.005..0.05),
            ..s.price
        };
        let supply = (0..slots).map(|_| rng.random_range(0.0..20.0)).collect();
        (reduce(&s).unwrap(), supply)
    }

    #[test]
    fn costates_nonincreasing_on_interior_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let (r, s) = random_instance(&mut rng);
            let sol = solve_tpbv(&r, &s).unwrap();
            if !sol.interior {
                continue;
            }
            for row in &sol.costates {
                for t in 0..r.slots() {
                    assert!(row[t] >= (1.0 + r.omega(t)) * row[t + 1] - 1e-12);
                    assert!(row[t] >= 0.0);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn oracle_triangle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, s) = random_instance(&mut rng);
            let tp = solve_tpbv(&r, &s).unwrap();
            prop_assume!(tp.interior);
            let cf = solve_closed_form(&r, &s).unwrap();
            let br = solve_best_response(&r, &s, BestResponseOptions { max_iters: 20_000, tol: 1e-9 }).unwrap();
            prop_assert!(cf.max_demand_gap(&tp) < 1e-8);
            prop_assert!(br.max_demand_gap(&tp) < 1e-6);
            prop_assert!(stationarity_residual(&r, &cf) < 1e-8);
        }
    }
}
