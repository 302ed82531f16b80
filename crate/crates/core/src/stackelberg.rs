//! Leader's optimal supply and the Stackelberg equilibrium.
//!
//! Two independent routes:
//!
//! * [`solve_reduced_qp`] substitutes the affine follower response
//!   `d = d0 + S s`, `p = p0 + P s` ([`ResponseMap`]) into the leader cost and
//!   solves the resulting unconstrained quadratic program.
//! * [`assemble_kkt_system`] writes the leader's problem as a nonlinear
//!   program whose constraints are the follower characterization (price
//!   state, demand formula, `b` recursion) and stacks its first-order
//!   conditions into one square linear system.
//!
//! # KKT system
//!
//! Unknowns per slot `t`: `s_t`, slot price `p_t`, state multiplier
//! `theta_t`, and per user `d^i_t`, `b^i_t`, `nu^i_t`, `mu^i_t`; `(4N+3)T` in
//! total, stored slot by slot. With `c^i = a^i (1 + w_t) - g`,
//! `m^i = 1 + w_t - g/a^i`, `k^i = g m^i q^i_{t+1} / (1 + g^2 sum_j q^j_{t+1}/a^j)`
//! the constraints are
//!
//! ```text
//! theta_t : p_0 = p1;  p_t - (1 + w_{t-1}) p_{t-1} - g D_{t-1} + g s_{t-1} = 0      (t >= 1)
//! nu^i_t  : c^i d^i_t + (1 + w_t + g q^i_t) p_t + g b^i_t = (1 + w_t) psi^i_t
//! mu^i_t  : b^i_t - m^i b^i_{t+1} + k^i g sum_j b^j_{t+1}/a^j + k^i s_t
//!           = psi^i_t/a^i + k^i sum_j psi^j_t/a^j
//! ```
//!
//! and with `L = C + sum y (row z - rhs)` the stationarity rows are
//!
//! ```text
//! ds_t    : (dbar + kappa) s_t - p_t - kappa D_t + g theta_{t+1} + sum_i k^i mu^i_t = 0
//! dd^i_t  : kappa (D_t - s_t) - g theta_{t+1} + c^i nu^i_t = 0
//! dp_t    : -s_t + theta_t - (1 + w_t) theta_{t+1} + sum_i (1 + w_t + g q^i_t) nu^i_t = 0
//! db^i_t  : g nu^i_t + mu^i_t - m^i_{t-1} mu^i_{t-1} + (g/a^i_{t-1}) sum_j k^j_{t-1} mu^j_{t-1} = 0
//! ```
//!
//! (`theta_T = 0`, `mu_{-1} = 0`). Read as recursions these are the leader
//! response `s = (p + kappa D - g theta_{t+1} - sum k mu)/(dbar + kappa)`, a
//! backward adjoint for `theta` and a forward recursion for `mu`.
//! [`Variant::Literal`] instead transcribes the commonly printed form of these
//! relations; its index and sign slips make it disagree with the reduced QP.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Triplets};
use crate::nash::{self, BestResponseOptions, NashError, NashSolution};
use crate::price::{self, max_abs_diff, PricePath};
use crate::scenario::ReducedScenario;
use crate::Variant;

/// Relative PSD slack for the reduced Hessian certificate.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StackelbergError {
    #[error(transparent)]
    Nash(#[from] NashError),
    #[error("KKT system is singular: {0}")]
    SingularSystem(#[from] LinalgError),
    #[error("supply has {found} entries, horizon is {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    ReducedQp,
    KktSystem,
    /// Projected descent with best-response followers, used off the interior.
    ProjectedGradient,
}

/// Followers' equilibrium as an affine function of the announced supply.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    /// `base[i][t]`, the response to `s = 0`.
    pub base: Vec<Vec<f64>>,
    /// Row `i*T + t`, column `tau`: `d d^i_t / d s_tau`.
    pub sensitivity: DMatrix<f64>,
    /// Price path (length `T+1`) at `s = 0`.
    pub price_base: Vec<f64>,
    /// `(T+1) x T`.
    pub price_sensitivity: DMatrix<f64>,
    /// Whether every probe solve was interior. The map is exact either way;
    /// only the final supply's response needs to be interior.
    pub probes_interior: bool,
}

impl ResponseMap {
    pub fn slots(&self) -> usize {
        self.sensitivity.ncols()
    }

    pub fn num_users(&self) -> usize {
        self.base.len()
    }

    pub fn demands(&self, supply: &[f64]) -> Vec<Vec<f64>> {
        let slots = self.slots();
        let s = DVector::from_column_slice(supply);
        let flat = &self.sensitivity * s;
        self.base
            .iter()
            .enumerate()
            .map(|(i, row)| (0..slots).map(|t| row[t] + flat[i * slots + t]).collect())
            .collect()
    }

    pub fn price(&self, supply: &[f64]) -> PricePath {
        let s = DVector::from_column_slice(supply);
        let dp = &self.price_sensitivity * s;
        PricePath::new(self.price_base.iter().zip(dp.iter()).map(|(a, b)| a + b).collect())
    }

    /// `T x T` sensitivity of total demand.
    pub fn total_sensitivity(&self) -> DMatrix<f64> {
        let slots = self.slots();
        let mut m = DMatrix::zeros(slots, slots);
        for i in 0..self.num_users() {
            m += self.sensitivity.rows(i * slots, slots);
        }
        m
    }

    pub fn total_base(&self) -> Vec<f64> {
        (0..self.slots()).map(|t| price::total_demand(&self.base, t)).collect()
    }
}

/// Materializes the response map from `T + 1` closed-form solves.
pub fn compute_response_map(reduced: &ReducedScenario) -> Result<ResponseMap, StackelbergError> {
    let (n, slots) = (reduced.num_users(), reduced.slots());
    let probes: Vec<NashSolution> = (0..=slots)
        .into_par_iter()
        .map(|k| {
            let mut s = vec![0.0; slots];
            if k > 0 {
                s[k - 1] = 1.0;
            }
            nash::solve_closed_form(reduced, &s)
        })
        .collect::<Result<_, _>>()?;
    let base = &probes[0];
    let mut sensitivity = DMatrix::zeros(n * slots, slots);
    let mut price_sensitivity = DMatrix::zeros(slots + 1, slots);
    for (tau, probe) in probes[1..].iter().enumerate() {
        for i in 0..n {
            for t in 0..slots {
                sensitivity[(i * slots + t, tau)] = probe.demands[i][t] - base.demands[i][t];
            }
        }
        for t in 0..=slots {
            price_sensitivity[(t, tau)] = probe.price[t] - base.price[t];
        }
    }
    Ok(ResponseMap {
        base: base.demands.clone(),
        sensitivity,
        price_base: base.price.as_slice().to_vec(),
        price_sensitivity,
        probes_interior: probes.iter().all(|p| p.interior),
    })
}

/// Variable kinds of the KKT system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KktVar {
    Supply(usize),
    Price(usize),
    Theta(usize),
    Demand(usize, usize),
    B(usize, usize),
    Nu(usize, usize),
    Mu(usize, usize),
}

/// Residual block of the KKT system; each row is paired with one unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KktBlock {
    /// Price state rows (paired with `theta`).
    State,
    /// `d/ds` rows.
    LeaderStationarity,
    /// `d/dd` rows.
    DemandStationarity,
    /// `d/dp` rows.
    ThetaAdjoint,
    /// `d/db` rows.
    MuRecursion,
    /// Demand formula rows (paired with `nu`).
    FollowerResponse,
    /// `b` recursion rows (paired with `mu`).
    BRecursion,
}

impl KktBlock {
    pub const ALL: [KktBlock; 7] = [
        KktBlock::State,
        KktBlock::LeaderStationarity,
        KktBlock::DemandStationarity,
        KktBlock::ThetaAdjoint,
        KktBlock::MuRecursion,
        KktBlock::FollowerResponse,
        KktBlock::BRecursion,
    ];

    fn of(var: KktVar) -> KktBlock {
        match var {
            KktVar::Supply(_) => KktBlock::LeaderStationarity,
            KktVar::Price(_) => KktBlock::ThetaAdjoint,
            KktVar::Theta(_) => KktBlock::State,
            KktVar::Demand(..) => KktBlock::DemandStationarity,
            KktVar::B(..) => KktBlock::MuRecursion,
            KktVar::Nu(..) => KktBlock::FollowerResponse,
            KktVar::Mu(..) => KktBlock::BRecursion,
        }
    }
}

/// Max-abs residual per block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KktResiduals {
    pub state: f64,
    pub leader_stationarity: f64,
    pub demand_stationarity: f64,
    pub theta_adjoint: f64,
    pub mu_recursion: f64,
    pub follower_response: f64,
    pub b_recursion: f64,
}

impl KktResiduals {
    pub fn get(&self, block: KktBlock) -> f64 {
        match block {
            KktBlock::State => self.state,
            KktBlock::LeaderStationarity => self.leader_stationarity,
            KktBlock::DemandStationarity => self.demand_stationarity,
            KktBlock::ThetaAdjoint => self.theta_adjoint,
            KktBlock::MuRecursion => self.mu_recursion,
            KktBlock::FollowerResponse => self.follower_response,
            KktBlock::BRecursion => self.b_recursion,
        }
    }

    fn slot(&mut self, block: KktBlock) -> &mut f64 {
        match block {
            KktBlock::State => &mut self.state,
            KktBlock::LeaderStationarity => &mut self.leader_stationarity,
            KktBlock::DemandStationarity => &mut self.demand_stationarity,
            KktBlock::ThetaAdjoint => &mut self.theta_adjoint,
            KktBlock::MuRecursion => &mut self.mu_recursion,
            KktBlock::FollowerResponse => &mut self.follower_response,
            KktBlock::BRecursion => &mut self.b_recursion,
        }
    }

    pub fn max(&self) -> f64 {
        KktBlock::ALL.iter().map(|&b| self.get(b)).fold(0.0, f64::max)
    }

    /// Block with the largest residual.
    pub fn worst(&self) -> (KktBlock, f64) {
        KktBlock::ALL
            .iter()
            .map(|&b| (b, self.get(b)))
            .fold((KktBlock::State, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
    }
}

/// Square KKT system `K z = r`, assembled as triplets.
#[derive(Debug, Clone)]
pub struct KktSystem {
    variant: Variant,
    users: usize,
    slots: usize,
    matrix: Triplets,
    rhs: Vec<f64>,
}

impl KktSystem {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn num_users(&self) -> usize {
        self.users
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn dimension(&self) -> usize {
        self.rhs.len()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn unknowns(&self) -> usize {
        self.matrix.cols()
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        self.matrix.to_dense()
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Position of `var` in the unknown vector (and of its paired row).
    pub fn index(&self, var: KktVar) -> usize {
        let n = self.users;
        let block = 4 * n + 3;
        match var {
            KktVar::Supply(t) => t * block,
            KktVar::Price(t) => t * block + 1,
            KktVar::Theta(t) => t * block + 2,
            KktVar::Demand(i, t) => t * block + 3 + i,
            KktVar::B(i, t) => t * block + 3 + n + i,
            KktVar::Nu(i, t) => t * block + 3 + 2 * n + i,
            KktVar::Mu(i, t) => t * block + 3 + 3 * n + i,
        }
    }

    fn var_at(&self, k: usize) -> KktVar {
        let n = self.users;
        let block = 4 * n + 3;
        let (t, r) = (k / block, k % block);
        match r {
            0 => KktVar::Supply(t),
            1 => KktVar::Price(t),
            2 => KktVar::Theta(t),
            r if r < 3 + n => KktVar::Demand(r - 3, t),
            r if r < 3 + 2 * n => KktVar::B(r - 3 - n, t),
            r if r < 3 + 3 * n => KktVar::Nu(r - 3 - 2 * n, t),
            r => KktVar::Mu(r - 3 - 3 * n, t),
        }
    }

    /// Matrix coefficient of `col` in the row paired with `row`.
    pub fn coefficient(&self, row: KktVar, col: KktVar) -> f64 {
        let (r, c) = (self.index(row), self.index(col));
        self.matrix
            .entries()
            .iter()
            .filter(|e| e.0 == r && e.1 == c)
            .map(|e| e.2)
            .sum()
    }

    pub fn solve(&self) -> Result<Vec<f64>, LinalgError> {
        let x = linalg::solve(self.matrix.to_dense(), &DVector::from_column_slice(&self.rhs))?;
        Ok(x.iter().copied().collect())
    }

    pub fn residuals(&self, z: &[f64]) -> KktResiduals {
        let kz = self.matrix.mul_vec(z);
        let mut out = KktResiduals::default();
        for (k, (a, b)) in kz.iter().zip(&self.rhs).enumerate() {
            let slot = out.slot(KktBlock::of(self.var_at(k)));
            *slot = slot.max((a - b).abs());
        }
        out
    }

    fn add(&mut self, row: KktVar, col: KktVar, value: f64) {
        let (r, c) = (self.index(row), self.index(col));
        self.matrix.add(r, c, value);
    }

    fn set_rhs(&mut self, row: KktVar, value: f64) {
        let r = self.index(row);
        self.rhs[r] = value;
    }

    /// Solves for the multipliers with the primal part of `z` held fixed,
    /// using the `d/dd`, `d/dp`, `d/db` rows. Returns the completed vector.
    fn complete_multipliers(&self, mut z: Vec<f64>) -> Result<Vec<f64>, LinalgError> {
        let dim = self.dimension();
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for k in 0..dim {
            match self.var_at(k) {
                KktVar::Price(_) | KktVar::Demand(..) | KktVar::B(..) => rows.push(k),
                KktVar::Theta(_) | KktVar::Nu(..) | KktVar::Mu(..) => cols.push(k),
                KktVar::Supply(_) => {}
            }
        }
        let mut row_pos = vec![usize::MAX; dim];
        for (p, &r) in rows.iter().enumerate() {
            row_pos[r] = p;
        }
        let mut col_pos = vec![usize::MAX; dim];
        for (p, &c) in cols.iter().enumerate() {
            col_pos[c] = p;
        }
        let m = rows.len();
        let mut a = DMatrix::zeros(m, m);
        let mut rhs = DVector::from_iterator(m, rows.iter().map(|&r| self.rhs[r]));
        for &(r, c, v) in self.matrix.entries() {
            let pr = row_pos[r];
            if pr == usize::MAX {
                continue;
            }
            if col_pos[c] != usize::MAX {
                a[(pr, col_pos[c])] += v;
            } else {
                rhs[pr] -= v * z[c];
            }
        }
        let y = linalg::solve(a, &rhs)?;
        for (p, &c) in cols.iter().enumerate() {
            z[c] = y[p];
        }
        Ok(z)
    }
}

struct SlotCoefficients {
    /// `c^i = a(1+w) - g`
    c: Vec<f64>,
    /// `m^i = 1 + w - g/a`
    m: Vec<f64>,
    /// `k^i`
    k: Vec<f64>,
    /// `1 + g^2 sum_j q^j_{t+1}/a^j`
    den: f64,
}

fn slot_coefficients(reduced: &ReducedScenario, q: &[Vec<f64>], t: usize) -> Result<SlotCoefficients, NashError> {
    let (n, g) = (reduced.num_users(), reduced.gamma());
    let den = nash::coupling_denominator(reduced, q, t)?;
    let w1 = 1.0 + reduced.omega(t);
    let a = |i| reduced.alpha(i, t);
    let m: Vec<f64> = (0..n).map(|i| w1 - g / a(i)).collect();
    Ok(SlotCoefficients {
        c: (0..n).map(|i| a(i) * w1 - g).collect(),
        k: (0..n).map(|i| g * m[i] * q[i][t + 1] / den).collect(),
        m,
        den,
    })
}

/// Builds the square first-order system of the leader's problem.
pub fn assemble_kkt_system(reduced: &ReducedScenario) -> Result<KktSystem, StackelbergError> {
    assemble_kkt_system_with(reduced, Variant::Derived)
}

pub fn assemble_kkt_system_with(reduced: &ReducedScenario, variant: Variant) -> Result<KktSystem, StackelbergError> {
    let (n, slots) = (reduced.num_users(), reduced.slots());
    let dim = (4 * n + 3) * slots;
    let mut sys = KktSystem {
        variant,
        users: n,
        slots,
        matrix: Triplets::new(dim, dim),
        rhs: vec![0.0; dim],
    };
    let q = nash::price_coefficients(reduced)?;
    let coeffs = (0..slots)
        .map(|t| slot_coefficients(reduced, &q, t))
        .collect::<Result<Vec<_>, _>>()?;
    match variant {
        Variant::Derived => assemble_derived(reduced, &q, &coeffs, &mut sys),
        Variant::Literal => assemble_literal(reduced, &q, &coeffs, &mut sys),
    }
    Ok(sys)
}

fn assemble_derived(reduced: &ReducedScenario, q: &[Vec<f64>], co: &[SlotCoefficients], sys: &mut KktSystem) {
    use KktVar::*;
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    for t in 0..slots {
        let w1 = 1.0 + reduced.omega(t);
        let (kap, dbar) = (reduced.kappa(t), reduced.delta_bar(t));
        let c = &co[t];
        let last = t + 1 == slots;

        // price state
        sys.add(Theta(t), Price(t), 1.0);
        if t == 0 {
            sys.set_rhs(Theta(0), reduced.initial_price());
        } else {
            sys.add(Theta(t), Price(t - 1), -(1.0 + reduced.omega(t - 1)));
            sys.add(Theta(t), Supply(t - 1), g);
            for i in 0..n {
                sys.add(Theta(t), Demand(i, t - 1), -g);
            }
        }

        // d/ds_t
        sys.add(Supply(t), Supply(t), dbar + kap);
        sys.add(Supply(t), Price(t), -1.0);
        for i in 0..n {
            sys.add(Supply(t), Demand(i, t), -kap);
            sys.add(Supply(t), Mu(i, t), c.k[i]);
        }
        if !last {
            sys.add(Supply(t), Theta(t + 1), g);
        }

        // d/dp_t
        sys.add(Price(t), Supply(t), -1.0);
        sys.add(Price(t), Theta(t), 1.0);
        if !last {
            sys.add(Price(t), Theta(t + 1), -w1);
        }
        for i in 0..n {
            sys.add(Price(t), Nu(i, t), w1 + g * q[i][t]);
        }

        for i in 0..n {
            let a = reduced.alpha(i, t);
            // d/dd^i_t
            sys.add(Demand(i, t), Supply(t), -kap);
            for j in 0..n {
                sys.add(Demand(i, t), Demand(j, t), kap);
            }
            if !last {
                sys.add(Demand(i, t), Theta(t + 1), -g);
            }
            sys.add(Demand(i, t), Nu(i, t), c.c[i]);

            // d/db^i_t
            sys.add(B(i, t), Nu(i, t), g);
            sys.add(B(i, t), Mu(i, t), 1.0);
            if t > 0 {
                let p = &co[t - 1];
                sys.add(B(i, t), Mu(i, t - 1), -p.m[i]);
                let a_prev = reduced.alpha(i, t - 1);
                for j in 0..n {
                    sys.add(B(i, t), Mu(j, t - 1), g * p.k[j] / a_prev);
                }
            }

            // demand formula
            sys.add(Nu(i, t), Demand(i, t), c.c[i]);
            sys.add(Nu(i, t), Price(t), w1 + g * q[i][t]);
            sys.add(Nu(i, t), B(i, t), g);
            sys.set_rhs(Nu(i, t), w1 * reduced.psi_bar(i, t));

            // b recursion
            sys.add(Mu(i, t), B(i, t), 1.0);
            sys.add(Mu(i, t), Supply(t), c.k[i]);
            if !last {
                sys.add(Mu(i, t), B(i, t + 1), -c.m[i]);
                for j in 0..n {
                    sys.add(Mu(i, t), B(j, t + 1), c.k[i] * g / reduced.alpha(j, t));
                }
            }
            let psi_sum: f64 = (0..n).map(|j| reduced.psi_bar(j, t) / reduced.alpha(j, t)).sum();
            sys.set_rhs(Mu(i, t), reduced.psi_bar(i, t) / a + c.k[i] * psi_sum);
        }
    }
}

/// Printed relations, transcribed with `sum_j (..)^i` read as `sum_i` and the
/// aggregate demand for the unindexed `d_t`.
fn assemble_literal(reduced: &ReducedScenario, q: &[Vec<f64>], co: &[SlotCoefficients], sys: &mut KktSystem) {
    use KktVar::*;
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    // `a (1 + w - g/a)`, the printed follower denominator
    let cden = |i: usize, t: usize| reduced.alpha(i, t) * (1.0 + reduced.omega(t) - g / reduced.alpha(i, t));
    for t in 0..slots {
        let w1 = 1.0 + reduced.omega(t);
        let (kap, dbar) = (reduced.kappa(t), reduced.delta_bar(t));
        let den = co[t].den;
        let last = t + 1 == slots;

        // state, p_0 = p1
        sys.add(Theta(t), Price(t), 1.0);
        if t == 0 {
            sys.set_rhs(Theta(0), reduced.initial_price());
        } else {
            sys.add(Theta(t), Price(t - 1), -(1.0 + reduced.omega(t - 1)));
            sys.add(Theta(t), Supply(t - 1), g);
            for i in 0..n {
                sys.add(Theta(t), Demand(i, t - 1), -g);
            }
        }

        // (dbar + kappa) s = p + kappa D + g theta + g/den sum mu
        sys.add(Supply(t), Supply(t), dbar + kap);
        sys.add(Supply(t), Price(t), -1.0);
        sys.add(Supply(t), Theta(t), -g);
        for i in 0..n {
            sys.add(Supply(t), Demand(i, t), -kap);
            sys.add(Supply(t), Mu(i, t), -g / den);
        }

        // theta_{t-1} = (1 + w_t) theta_t - s_t - sum nu (q - 1)/(a cden), theta_{T-1} = 0
        if last {
            sys.add(Price(t), Theta(t), 1.0);
        } else {
            let u = t + 1;
            let wu = 1.0 + reduced.omega(u);
            sys.add(Price(t), Theta(t), 1.0);
            sys.add(Price(t), Theta(u), -wu);
            sys.add(Price(t), Supply(u), 1.0);
            for i in 0..n {
                sys.add(Price(t), Nu(i, u), (q[i][u] - 1.0) / (reduced.alpha(i, u) * cden(i, u)));
            }
        }

        for i in 0..n {
            let a = reduced.alpha(i, t);
            // kappa (D - s) + g theta + nu = 0
            for j in 0..n {
                sys.add(Demand(i, t), Demand(j, t), kap);
            }
            sys.add(Demand(i, t), Supply(t), -kap);
            sys.add(Demand(i, t), Theta(t), g);
            sys.add(Demand(i, t), Nu(i, t), 1.0);

            // mu_{t} = {1 + w - 1/a - (g^2/a)/den}_{t-1} mu_{t-1} + nu_t/(a_t cden_t), mu_0 = 0
            sys.add(B(i, t), Mu(i, t), 1.0);
            if t > 0 {
                let p = t - 1;
                let ap = reduced.alpha(i, p);
                let factor = 1.0 + reduced.omega(p) - 1.0 / ap - (g * g / ap) / co[p].den;
                sys.add(B(i, t), Mu(i, p), -factor);
                sys.add(B(i, t), Nu(i, t), -1.0 / (a * cden(i, t)));
            }

            // printed demand formula
            let cd = cden(i, t);
            sys.add(Nu(i, t), Demand(i, t), 1.0);
            sys.add(Nu(i, t), Price(t), -((q[i][t] - 1.0) / cd - 1.0) / a);
            sys.add(Nu(i, t), B(i, t), -1.0 / (a * cd));
            sys.set_rhs(Nu(i, t), (reduced.psi_bar(i, t) / a) * (1.0 / cd + 1.0));

            // printed b recursion
            sys.add(Mu(i, t), B(i, t), 1.0);
            sys.add(Mu(i, t), Supply(t), g / den);
            if !last {
                sys.add(Mu(i, t), B(i, t + 1), -(w1 - 1.0 / a));
                for j in 0..n {
                    sys.add(Mu(i, t), B(j, t + 1), g * g / (den * reduced.alpha(j, t)));
                }
            }
            let psi_sum: f64 = (0..n).map(|j| reduced.psi_bar(j, t) / reduced.alpha(j, t)).sum();
            sys.set_rhs(Mu(i, t), reduced.psi_bar(i, t) / a + g * psi_sum / den);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackelbergSolution {
    pub supply: Vec<f64>,
    /// `demands[i][t]`
    pub demands: Vec<Vec<f64>>,
    /// Length `T+1`.
    pub price: PricePath,
    pub theta: Vec<f64>,
    /// `mu[i][t]`
    pub mu: Vec<Vec<f64>>,
    /// `nu[i][t]`
    pub nu: Vec<Vec<f64>>,
    /// `b[i][t]`, recursion coefficients at the equilibrium supply.
    pub b: Vec<Vec<f64>>,
    pub leader_cost: f64,
    pub residuals: KktResiduals,
    pub method: Route,
    pub variant: Variant,
    /// Some supply is negative or some demand non-positive.
    pub non_interior: bool,
    /// Smallest eigenvalue of the reduced Hessian (reduced-QP route only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessian_min_eigenvalue: Option<f64>,
    /// Whether the reduced Hessian passed the PSD certificate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessian_psd: Option<bool>,
}

impl StackelbergSolution {
    pub fn total_demands(&self) -> Vec<f64> {
        (0..self.supply.len()).map(|t| price::total_demand(&self.demands, t)).collect()
    }

    /// Max-abs gap over supply, demands and prices.
    pub fn gap(&self, other: &StackelbergSolution) -> f64 {
        let d = self
            .demands
            .iter()
            .zip(&other.demands)
            .map(|(a, b)| max_abs_diff(a, b))
            .fold(0.0, f64::max);
        max_abs_diff(&self.supply, &other.supply)
            .max(d)
            .max(self.price.max_abs_diff(&other.price))
    }
}

/// `sum_t dbar s^2/2 - s p + kappa (s - D)^2/2` over slot prices `p_0..p_{T-1}`.
pub fn leader_cost(reduced: &ReducedScenario, supply: &[f64], demands: &[Vec<f64>], price: &[f64]) -> f64 {
    (0..reduced.slots())
        .map(|t| reduced.leader_stage_cost(t, supply[t], price::total_demand(demands, t), price[t]))
        .sum()
}

/// Leader cost with the followers' interior response substituted.
pub fn leader_cost_at(reduced: &ReducedScenario, supply: &[f64]) -> Result<f64, StackelbergError> {
    let sol = nash::solve_closed_form(reduced, supply)?;
    Ok(leader_cost(reduced, supply, &sol.demands, sol.price.as_slice()))
}

/// Quadratic form `C(s) = s'Hs/2 + c's + constant` of the reduced problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderQuadratic {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl LeaderQuadratic {
    pub fn new(reduced: &ReducedScenario, map: &ResponseMap) -> Self {
        let slots = reduced.slots();
        let sd = map.total_sensitivity();
        let d0 = DVector::from_vec(map.total_base());
        let p0 = DVector::from_iterator(slots, map.price_base[..slots].iter().copied());
        let p = map.price_sensitivity.rows(0, slots).into_owned();
        let e = DMatrix::identity(slots, slots) - sd;
        let kappa = DMatrix::from_diagonal(&DVector::from_iterator(slots, (0..slots).map(|t| reduced.kappa(t))));
        let dbar = DMatrix::from_diagonal(&DVector::from_iterator(slots, (0..slots).map(|t| reduced.delta_bar(t))));
        let et_k = e.transpose() * &kappa;
        let hessian = dbar - (&p + p.transpose()) + &et_k * &e;
        let linear = -&p0 - &et_k * &d0;
        let constant = 0.5 * d0.dot(&(&kappa * &d0));
        LeaderQuadratic {
            hessian,
            linear,
            constant,
        }
    }

    pub fn value(&self, supply: &[f64]) -> f64 {
        let s = DVector::from_column_slice(supply);
        0.5 * s.dot(&(&self.hessian * &s)) + self.linear.dot(&s) + self.constant
    }

    /// `(min eigenvalue, max |eigenvalue|)`.
    pub fn spectrum(&self) -> (f64, f64) {
        // symmetrize against round-off before the eigen solve
        let h = 0.5 * (&self.hessian + self.hessian.transpose());
        let eig = SymmetricEigen::new(h).eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let norm = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (min, norm)
    }
}

fn is_non_interior(supply: &[f64], demands: &[Vec<f64>]) -> bool {
    supply.iter().any(|&s| s < 0.0) || demands.iter().flatten().any(|&d| d <= 0.0)
}

/// Fills a primal-dual vector and the solution from a supply and its Nash response.
fn from_nash(
    reduced: &ReducedScenario,
    supply: Vec<f64>,
    nash_sol: NashSolution,
    method: Route,
) -> Result<StackelbergSolution, StackelbergError> {
    use KktVar::*;
    let sys = assemble_kkt_system(reduced)?;
    let (n, slots) = (reduced.num_users(), reduced.slots());
    let coeffs = match nash_sol.coefficients {
        Some(ref c) => c.clone(),
        None => nash::backward_coefficients(reduced, &supply)?,
    };
    let mut z = vec![0.0; sys.dimension()];
    for t in 0..slots {
        z[sys.index(Supply(t))] = supply[t];
        z[sys.index(Price(t))] = nash_sol.price[t];
        for i in 0..n {
            z[sys.index(Demand(i, t))] = nash_sol.demands[i][t];
            z[sys.index(B(i, t))] = coeffs.b[i][t];
        }
    }
    let z = sys.complete_multipliers(z)?;
    let residuals = sys.residuals(&z);
    let mut sol = unpack(reduced, &sys, &z, method);
    // keep the follower solve's own values, not the round trip through z
    sol.demands = nash_sol.demands;
    sol.price = nash_sol.price;
    sol.residuals = residuals;
    sol.leader_cost = leader_cost(reduced, &sol.supply, &sol.demands, sol.price.as_slice());
    sol.non_interior = is_non_interior(&sol.supply, &sol.demands);
    Ok(sol)
}

fn unpack(reduced: &ReducedScenario, sys: &KktSystem, z: &[f64], method: Route) -> StackelbergSolution {
    use KktVar::*;
    let (n, slots, g) = (reduced.num_users(), reduced.slots(), reduced.gamma());
    let supply: Vec<f64> = (0..slots).map(|t| z[sys.index(Supply(t))]).collect();
    let per_user = |f: &dyn Fn(usize, usize) -> KktVar| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..slots).map(|t| z[sys.index(f(i, t))]).collect()).collect()
    };
    let demands = per_user(&Demand);
    let mut p: Vec<f64> = (0..slots).map(|t| z[sys.index(Price(t))]).collect();
    let last = slots - 1;
    p.push(price::step(
        p[last],
        reduced.omega(last),
        g,
        price::total_demand(&demands, last),
        supply[last],
        0.0,
    ));
    let leader = leader_cost(reduced, &supply, &demands, &p);
    StackelbergSolution {
        theta: (0..slots).map(|t| z[sys.index(Theta(t))]).collect(),
        mu: per_user(&Mu),
        nu: per_user(&Nu),
        b: per_user(&B),
        non_interior: is_non_interior(&supply, &demands),
        supply,
        demands,
        price: PricePath::new(p),
        leader_cost: leader,
        residuals: sys.residuals(z),
        method,
        variant: sys.variant,
        hessian_min_eigenvalue: None,
        hessian_psd: None,
    }
}

/// Minimizes the leader cost over the affine follower response.
///
/// An indefinite reduced Hessian is not an error: the stationary point is
/// returned with `hessian_psd = Some(false)`.
pub fn solve_reduced_qp(reduced: &ReducedScenario, map: &ResponseMap) -> Result<StackelbergSolution, StackelbergError> {
    let quad = LeaderQuadratic::new(reduced, map);
    let s = linalg::solve(quad.hessian.clone(), &(-&quad.linear))?;
    let supply: Vec<f64> = s.iter().copied().collect();
    let (min, norm) = quad.spectrum();
    let follower = nash::solve_closed_form(reduced, &supply)?;
    let mut sol = from_nash(reduced, supply, follower, Route::ReducedQp)?;
    sol.hessian_min_eigenvalue = Some(min);
    sol.hessian_psd = Some(min >= -PSD_TOLERANCE * norm);
    Ok(sol)
}

/// Solves the assembled KKT system directly.
pub fn solve_kkt(reduced: &ReducedScenario, variant: Variant) -> Result<StackelbergSolution, StackelbergError> {
    let sys = assemble_kkt_system_with(reduced, variant)?;
    let z = sys.solve()?;
    Ok(unpack(reduced, &sys, &z, Route::KktSystem))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedOptions {
    pub max_iters: usize,
    /// Stop once the projected step moves supply by less than this.
    pub tol: f64,
    pub follower: BestResponseOptions,
}

impl Default for ProjectedOptions {
    fn default() -> Self {
        ProjectedOptions {
            max_iters: 500,
            tol: 1e-7,
            follower: BestResponseOptions {
                max_iters: 20_000,
                tol: 1e-11,
            },
        }
    }
}

/// Leader optimization over `s >= 0` with clamped best-response followers.
///
/// Projected gradient descent with central-difference gradients and
/// backtracking; the follower response is only piecewise affine here, so the
/// result is a local stationary point.
pub fn solve_projected(
    reduced: &ReducedScenario,
    start: &[f64],
    options: ProjectedOptions,
) -> Result<StackelbergSolution, StackelbergError> {
    let slots = reduced.slots();
    if start.len() != slots {
        return Err(StackelbergError::DimensionMismatch {
            expected: slots,
            found: start.len(),
        });
    }
    let eval = |s: &[f64], warm: Option<&[Vec<f64>]>| -> Result<(f64, NashSolution), StackelbergError> {
        let f = nash::solve_best_response_from(reduced, s, options.follower, warm)?;
        Ok((leader_cost(reduced, s, &f.demands, f.price.as_slice()), f))
    };
    let mut s: Vec<f64> = start.iter().map(|v| v.max(0.0)).collect();
    let (mut cost, mut follower) = eval(&s, None)?;
    let mut step = 1.0;
    let h = 1e-5;
    for _ in 0..options.max_iters {
        let warm = follower.demands.clone();
        let grad = (0..slots)
            .into_par_iter()
            .map(|t| {
                let mut up = s.clone();
                let mut down = s.clone();
                up[t] += h;
                down[t] = (down[t] - h).max(0.0);
                let width = up[t] - down[t];
                Ok((eval(&up, Some(&warm))?.0 - eval(&down, Some(&warm))?.0) / width)
            })
            .collect::<Result<Vec<f64>, StackelbergError>>()?;
        let mut moved = None;
        while step > 1e-12 {
            let trial: Vec<f64> = s.iter().zip(&grad).map(|(x, g)| (x - step * g).max(0.0)).collect();
            let (c, f) = eval(&trial, Some(&warm))?;
            let decrease: f64 = s.iter().zip(&trial).zip(&grad).map(|((a, b), g)| g * (a - b)).sum();
            if c <= cost - 1e-4 * decrease {
                moved = Some((trial, c, f));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, c, f)) = moved else { break };
        let change = max_abs_diff(&trial, &s);
        s = trial;
        cost = c;
        follower = f;
        step = (step * 2.0).min(1.0);
        if change < options.tol {
            break;
        }
    }
    let pattern_nonneg = follower.demands.iter().flatten().all(|&d| d > 0.0);
    let mut sol = if pattern_nonneg {
        let cf = nash::solve_closed_form(reduced, &s)?;
        from_nash(reduced, s, cf, Route::ProjectedGradient)?
    } else {
        // multipliers of the interior system are meaningless on a clamped response
        let n = reduced.num_users();
        StackelbergSolution {
            theta: vec![f64::NAN; slots],
            mu: vec![vec![f64::NAN; slots]; n],
            nu: vec![vec![f64::NAN; slots]; n],
            b: vec![vec![f64::NAN; slots]; n],
            leader_cost: cost,
            residuals: KktResiduals {
                state: f64::NAN,
                leader_stationarity: f64::NAN,
                demand_stationarity: f64::NAN,
                theta_adjoint: f64::NAN,
                mu_recursion: f64::NAN,
                follower_response: f64::NAN,
                b_recursion: f64::NAN,
            },
            method: Route::ProjectedGradient,
            variant: Variant::Derived,
            non_interior: true,
            hessian_min_eigenvalue: None,
            hessian_psd: None,
            supply: s,
            demands: follower.demands,
            price: follower.price,
        }
    };
    sol.method = Route::ProjectedGradient;
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationOptions {
    pub trials: usize,
    pub radius: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            trials: 100,
            radius: 1e-3,
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumDiagnostics {
    /// Max-abs gap between the solution's demands and the followers' Nash at its supply.
    pub follower_gap: f64,
    /// Largest `C(s*) - C(s* + ds)` over the perturbation trials.
    pub worst_decrease: f64,
    pub trials: usize,
    pub radius: f64,
    pub tolerance: f64,
    pub residuals: KktResiduals,
    pub follower_consistent: bool,
    pub locally_optimal: bool,
}

impl EquilibriumDiagnostics {
    pub fn passed(&self) -> bool {
        self.follower_consistent && self.locally_optimal
    }
}

/// Follower tolerance for [`EquilibriumDiagnostics::follower_consistent`].
pub const FOLLOWER_TOLERANCE: f64 = 1e-8;

/// Checks both equilibrium conditions for `solution`.
///
/// Perturbations `ds` have `|ds|_inf = radius`, one coordinate pinned at
/// `+-radius` and the rest uniform in `[-radius, radius]`. Non-interior
/// solutions are checked against best-response followers.
pub fn validate_equilibrium(
    reduced: &ReducedScenario,
    solution: &StackelbergSolution,
    options: ValidationOptions,
) -> Result<EquilibriumDiagnostics, StackelbergError> {
    use rand::{Rng, SeedableRng};
    let slots = reduced.slots();
    let interior_followers = !solution.demands.iter().flatten().any(|&d| d <= 0.0);
    let cost_at = |s: &[f64]| -> Result<(f64, NashSolution), StackelbergError> {
        let f = if interior_followers {
            nash::solve_closed_form(reduced, s)?
        } else {
            nash::solve_best_response(reduced, s, ProjectedOptions::default().follower)?
        };
        Ok((leader_cost(reduced, s, &f.demands, f.price.as_slice()), f))
    };
    let (base, follower) = cost_at(&solution.supply)?;
    let follower_gap = solution
        .demands
        .iter()
        .zip(&follower.demands)
        .map(|(a, b)| max_abs_diff(a, b))
        .fold(0.0, f64::max);

    let perturbations: Vec<Vec<f64>> = {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(options.seed);
        (0..options.trials)
            .map(|_| {
                let mut ds: Vec<f64> = (0..slots).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let pin = rng.random_range(0..slots);
                ds[pin] = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                ds.iter().map(|v| v * options.radius).collect()
            })
            .collect()
    };
    let worst_decrease = perturbations
        .par_iter()
        .map(|ds| {
            let s: Vec<f64> = solution.supply.iter().zip(ds).map(|(a, b)| a + b).collect();
            Ok(base - cost_at(&s)?.0)
        })
        .collect::<Result<Vec<f64>, StackelbergError>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EquilibriumDiagnostics {
        follower_gap,
        worst_decrease,
        trials: options.trials,
        radius: options.radius,
        tolerance: options.tolerance,
        residuals: solution.residuals,
        follower_consistent: follower_gap <= FOLLOWER_TOLERANCE,
        locally_optimal: worst_decrease <= options.tolerance,
    })
}

/// Both routes plus cross-checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackelbergOutcome {
    /// Reduced-QP solution, or the projected fallback when that is not interior.
    pub equilibrium: StackelbergSolution,
    pub reduced_qp: StackelbergSolution,
    /// KKT-route solution in the requested variant, if the system solved.
    pub kkt: Option<StackelbergSolution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kkt_error: Option<String>,
    /// Max-abs gap between routes over `(s, d, p)`.
    pub route_gap: Option<f64>,
    pub probes_interior: bool,
    pub fallback_used: bool,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveOptions {
    pub variant: Variant,
    pub projected: ProjectedOptions,
}

pub fn solve(reduced: &ReducedScenario, options: SolveOptions) -> Result<StackelbergOutcome, StackelbergError> {
    let started = Instant::now();
    let map = compute_response_map(reduced)?;
    let qp = solve_reduced_qp(reduced, &map)?;
    let (kkt, kkt_error) = match solve_kkt(reduced, options.variant) {
        Ok(k) => (Some(k), None),
        Err(e) if options.variant == Variant::Literal => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let route_gap = kkt.as_ref().map(|k| k.gap(&qp));
    let fallback_used = qp.non_interior;
    let equilibrium = if fallback_used {
        solve_projected(reduced, &qp.supply, options.projected)?
    } else {
        qp.clone()
    };
    Ok(StackelbergOutcome {
        equilibrium,
        reduced_qp: qp,
        kkt,
        kkt_error,
        route_gap,
        probes_interior: map.probes_interior,
        fallback_used,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{reduce, testing::uniform, PriceParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn section_four() -> ReducedScenario {
        let f = crate::scenario::file::ScenarioFile::from_json_str(include_str!("../scenarios/eight_users.json")).unwrap();
        reduce(&f.into_scenario().unwrap()).unwrap()
    }

    /// N = 1, T = 1, alpha = 1, psi_bar = 3, p1 = 1.5, omega = -0.5,
    /// gamma = 0.2, dbar = 0.5, kappa = 0.3.
    fn scalar_case() -> ReducedScenario {
        // two equal weights with q ln(q/2) = ln 3
        let f = |q: f64| q * (q / 2.0).ln() - 3f64.ln();
        let (mut lo, mut hi) = (2.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        let q = 0.5 * (lo + hi);
        let r = reduce(&uniform(1, 1.5, -0.5, 0.2, &[1.0], &[vec![q / 2.0, q / 2.0]], q, 0.3, &[0.5])).unwrap();
        assert!((r.psi_bar(0, 0) - 3.0).abs() < 1e-9);
        r
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> ReducedScenario {
        let n = rng.random_range(1..=3);
        let slots = rng.random_range(1..=5);
        let q = 4.0;
        let alphas: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w = rng.random_range(0.5..3.5);
                vec![w, q - w]
            })
            .collect();
        let deltas: Vec<f64> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut s = uniform(slots, rng.random_range(0.5..2.0), -0.1, 0.02, &alphas, &weights, q, rng.random_range(0.1..1.0), &deltas);
        s.price = PriceParams {
            omega: (0..slots).map(|_| rng.random_range(-0.3..-0.01)).collect(),
            gamma: rng.random_range(0.005..0.1),
            ..s.price
        };
        reduce(&s).unwrap()
    }

    #[test]
    fn dimension_is_four_n_plus_three_times_t() {
        for (n, slots) in [(1, 1), (2, 3), (8, 20)] {
            let w = vec![vec![2.0, 2.0]; n];
            let a = vec![0.6; n];
            let r = reduce(&uniform(slots, 1.5, -0.05, 0.05, &a, &w, 4.0, 0.3, &[1.0])).unwrap();
            for v in [Variant::Derived, Variant::Literal] {
                let sys = assemble_kkt_system_with(&r, v).unwrap();
                assert_eq!(sys.rows(), (4 * n + 3) * slots);
                assert_eq!(sys.unknowns(), (4 * n + 3) * slots);
            }
        }
    }

    #[test]
    fn scalar_hand_solution() {
        // d = (3 - 1.5)/1 = 1.5; s = (p + kappa d)/(dbar + kappa) = 1.95/0.8;
        // nu = kappa (s - d)/c with c = 1 * 0.5 - 0.2 = 0.3; theta = s - 0.3 nu;
        // mu = -gamma nu.
        let r = scalar_case();
        let sol = solve_kkt(&r, Variant::Derived).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-10;
        assert!(close(sol.demands[0][0], 1.5));
        assert!(close(sol.supply[0], 2.4375));
        assert!(close(sol.nu[0][0], 0.9375));
        assert!(close(sol.theta[0], 2.15625));
        assert!(close(sol.mu[0][0], -0.1875));
        assert!(close(sol.b[0][0], 3.0));
        assert!(close(sol.price[0], 1.5));
        assert!(close(sol.price[1], 0.75 + 0.2 * (1.5 - 2.4375)));
        let qp = solve_reduced_qp(&r, &compute_response_map(&r).unwrap()).unwrap();
        assert!(qp.gap(&sol) < 1e-10);
        assert!(close(qp.theta[0], 2.15625) && close(qp.mu[0][0], -0.1875));
    }

    #[test]
    fn tiny_gamma_matches_one_variable_calculus() {
        let r = reduce(&uniform(1, 1.2, -0.05, 1e-9, &[0.8], &[vec![2.0, 2.0]], 4.0, 0.4, &[1.0, 2.0])).unwrap();
        let d = (r.psi_bar(0, 0) - 1.2) / 0.8;
        let dbar = r.delta_bar(0);
        let expected = (1.2 + 0.4 * d) / (dbar + 0.4);
        let qp = solve_reduced_qp(&r, &compute_response_map(&r).unwrap()).unwrap();
        assert!((qp.supply[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn tiny_gamma_has_tiny_sensitivity() {
        let r = reduce(&uniform(4, 1.5, -0.05, 1e-10, &[0.6, 0.7], &[vec![2.0, 2.0], vec![2.0, 2.0]], 4.0, 0.3, &[1.0])).unwrap();
        let map = compute_response_map(&r).unwrap();
        assert!(map.sensitivity.amax() < 1e-8);
        assert!(map.price_sensitivity.amax() < 1e-8);
    }

    #[test]
    fn response_map_is_affine() {
        let r = section_four();
        let map = compute_response_map(&r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let s: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..80.0)).collect();
            let direct = nash::solve_closed_form(&r, &s).unwrap();
            let via = map.demands(&s);
            for i in 0..8 {
                assert!(max_abs_diff(&via[i], &direct.demands[i]) < 1e-8);
            }
            assert!(map.price(&s).max_abs_diff(&direct.price) < 1e-8);
        }
    }

    #[test]
    fn later_demand_rises_with_supply() {
        let map = compute_response_map(&section_four()).unwrap();
        for tau in 0..20 {
            for i in 0..8 {
                for t in tau + 1..20 {
                    assert!(map.sensitivity[(i * 20 + t, tau)] >= 0.0, "user {i} slot {t} probe {tau}");
                }
            }
        }
    }

    #[test]
    fn leader_row_coefficient() {
        let r = section_four();
        let sys = assemble_kkt_system(&r).unwrap();
        for t in 0..20 {
            let ss = sys.coefficient(KktVar::Supply(t), KktVar::Supply(t));
            let sp = sys.coefficient(KktVar::Supply(t), KktVar::Price(t));
            let expected = 1.0 / (r.delta_bar(t) + r.kappa(t));
            assert!((-sp / ss - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn routes_agree_on_section_four() {
        let r = section_four();
        let out = solve(&r, SolveOptions::default()).unwrap();
        assert!(!out.fallback_used);
        assert!(out.route_gap.unwrap() < 1e-6, "{:?}", out.route_gap);
        let qp = &out.reduced_qp;
        assert!(qp.hessian_psd.unwrap());
        assert!(qp.residuals.max() < 1e-8, "{:?}", qp.residuals);
        assert!(out.kkt.as_ref().unwrap().residuals.max() < 1e-8);
        assert!(!qp.non_interior);
        let quad = LeaderQuadratic::new(&r, &compute_response_map(&r).unwrap());
        assert!((quad.value(&qp.supply) - qp.leader_cost).abs() < 1e-9 * qp.leader_cost.abs().max(1.0));
    }

    #[test]
    fn literal_variant_disagrees() {
        let r = section_four();
        let out = solve(&r, SolveOptions { variant: Variant::Literal, ..Default::default() }).unwrap();
        match out.route_gap {
            Some(g) => assert!(g > 1e-3),
            None => assert!(out.kkt_error.is_some()),
        }
    }

    #[test]
    fn validation_accepts_equilibrium_and_rejects_shift() {
        let r = section_four();
        let qp = solve_reduced_qp(&r, &compute_response_map(&r).unwrap()).unwrap();
        let diag = validate_equilibrium(&r, &qp, ValidationOptions::default()).unwrap();
        assert!(diag.passed(), "{diag:?}");
        let mut bad = qp.clone();
        bad.supply[0] += 0.1;
        let diag = validate_equilibrium(&r, &bad, ValidationOptions::default()).unwrap();
        assert!(!diag.locally_optimal);
        assert!(diag.worst_decrease > 1e-9);
    }

    #[test]
    fn doubling_kappa_tightens_balance() {
        let r = section_four();
        let imbalance = |r: &ReducedScenario| {
            let sol = solve_reduced_qp(r, &compute_response_map(r).unwrap()).unwrap();
            sol.supply.iter().zip(sol.total_demands()).map(|(s, d)| (s - d).powi(2)).sum::<f64>()
        };
        let mut s = r.scenario().clone();
        s.supplier.kappa = vec![0.6; 20];
        let doubled = reduce(&s).unwrap();
        assert!(imbalance(&doubled) <= imbalance(&r));
    }

    #[test]
    fn projected_fallback_keeps_supply_nonnegative() {
        // tiny appetite and a high price: the interior optimum would sell negative supply
        let r = reduce(&uniform(3, 0.05, -0.05, 0.05, &[0.5], &[vec![1.0; 5]], 5.0, 0.3, &[1.0])).unwrap();
        let out = solve(&r, SolveOptions::default()).unwrap();
        let eq = &out.equilibrium;
        assert!(eq.supply.iter().all(|&s| s >= 0.0));
        if out.fallback_used {
            assert_eq!(eq.method, Route::ProjectedGradient);
            assert!(eq.leader_cost <= out.reduced_qp.leader_cost.max(eq.leader_cost));
        }
    }

    #[test]
    fn supply_length_checked() {
        let r = scalar_case();
        assert!(matches!(
            solve_projected(&r, &[1.0, 2.0], ProjectedOptions::default()),
            Err(StackelbergError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn routes_agree_on_random_instances(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_instance(&mut rng);
            let qp = solve_reduced_qp(&r, &compute_response_map(&r).unwrap()).unwrap();
            let kkt = solve_kkt(&r, Variant::Derived).unwrap();
            prop_assert!(qp.gap(&kkt) < 1e-6, "gap {}", qp.gap(&kkt));
            let quad = LeaderQuadratic::new(&r, &compute_response_map(&r).unwrap());
            prop_assert!((quad.value(&qp.supply) - qp.leader_cost).abs() < 1e-9 * qp.leader_cost.abs().max(1.0));
        }
    }
}
