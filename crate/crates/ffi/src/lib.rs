//! C ABI over the stackgrid solvers.
//!
//! Handles are opaque and owned by the caller once returned; release them with
//! the matching `_free`. Every fallible call returns an [`SgStatus`]; on a
//! non-zero status a message is available from [`sg_last_error_message`] on
//! the same thread. Arrays are caller-allocated: pass a buffer and its length
//! in elements. Demands are row-major, `users x horizon`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stackgrid::nash::{self, BestResponseOptions};
use stackgrid::scenario::file::ScenarioFile;
use stackgrid::scenario::{self, ReducedScenario};
use stackgrid::stackelberg::{self, SolveOptions};
use stackgrid::Variant;

/// Status codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidScenario = 4,
    DimensionMismatch = 5,
    NumericalFailure = 6,
    BufferTooSmall = 7,
    InvalidArgument = 8,
    Panic = 9,
}

/// Which Stackelberg solution to return.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgRoute {
    /// Reduced QP, or the projected fallback off the interior.
    Auto = 0,
    ReducedQp = 1,
    KktSystem = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgNashMethod {
    ClosedForm = 0,
    Tpbv = 1,
    BestResponse = 2,
}

/// Validated, reduced scenario.
pub struct SgScenario {
    reduced: ReducedScenario,
}

/// Supply, demands and prices of a solve.
pub struct SgSolution {
    supply: Vec<f64>,
    demands: Vec<Vec<f64>>,
    price: Vec<f64>,
    leader_cost: f64,
    interior: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: SgStatus, message: impl Into<String>) -> SgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> SgStatus) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SgStatus::Panic, "internal panic"),
    }
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Parses and validates a scenario JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_scenario_from_json(json: *const c_char, out: *mut *mut SgScenario) -> SgStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(SgStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let text = match CStr::from_ptr(json).to_str() {
            Ok(t) => t,
            Err(e) => return fail(SgStatus::InvalidUtf8, e.to_string()),
        };
        let file = match ScenarioFile::from_json_str(text) {
            Ok(f) => f,
            Err(e) => return fail(SgStatus::ParseError, e.to_string()),
        };
        let raw = match file.into_scenario() {
            Ok(s) => s,
            Err(e) => return fail(SgStatus::ParseError, e.to_string()),
        };
        let reduced = match scenario::validate(raw).map_err(|e| e.to_string()).and_then(|s| {
            scenario::reduce(&s).map_err(|e| e.to_string())
        }) {
            Ok(r) => r,
            Err(e) => return fail(SgStatus::InvalidScenario, e),
        };
        put(out, SgScenario { reduced });
        SgStatus::Ok
    })
}

/// # Safety
/// `scenario` must come from [`sg_scenario_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sg_scenario_free(scenario: *mut SgScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_scenario_horizon(scenario: *const SgScenario, out: *mut usize) -> SgStatus {
    if scenario.is_null() || out.is_null() {
        return fail(SgStatus::NullPointer, "null argument");
    }
    *out = (*scenario).reduced.slots();
    SgStatus::Ok
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_scenario_num_users(scenario: *const SgScenario, out: *mut usize) -> SgStatus {
    if scenario.is_null() || out.is_null() {
        return fail(SgStatus::NullPointer, "null argument");
    }
    *out = (*scenario).reduced.num_users();
    SgStatus::Ok
}

/// Solves the Stackelberg game.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_solve_stackelberg(
    scenario: *const SgScenario,
    route: SgRoute,
    out: *mut *mut SgSolution,
) -> SgStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            return fail(SgStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let reduced = &(*scenario).reduced;
        let outcome = match stackelberg::solve(reduced, SolveOptions::default()) {
            Ok(o) => o,
            Err(e) => return fail(SgStatus::NumericalFailure, e.to_string()),
        };
        let sol = match route {
            SgRoute::Auto => outcome.equilibrium,
            SgRoute::ReducedQp => outcome.reduced_qp,
            SgRoute::KktSystem => match outcome.kkt {
                Some(k) => k,
                None => return fail(SgStatus::NumericalFailure, outcome.kkt_error.unwrap_or_default()),
            },
        };
        put(
            out,
            SgSolution {
                interior: !sol.non_interior,
                leader_cost: sol.leader_cost,
                supply: sol.supply,
                demands: sol.demands,
                price: sol.price.into_vec(),
            },
        );
        SgStatus::Ok
    })
}

/// Solves the followers' game for a fixed supply of `len` slots.
///
/// # Safety
/// `supply` must point to `len` doubles; `scenario` must be live.
#[no_mangle]
pub unsafe extern "C" fn sg_solve_nash(
    scenario: *const SgScenario,
    supply: *const f64,
    len: usize,
    method: SgNashMethod,
    out: *mut *mut SgSolution,
) -> SgStatus {
    guard(|| {
        if scenario.is_null() || supply.is_null() || out.is_null() {
            return fail(SgStatus::NullPointer, "null argument");
        }
        *out = ptr::null_mut();
        let reduced = &(*scenario).reduced;
        if len != reduced.slots() {
            return fail(
                SgStatus::DimensionMismatch,
                format!("supply has {len} entries, horizon is {}", reduced.slots()),
            );
        }
        let s = std::slice::from_raw_parts(supply, len).to_vec();
        let result = match method {
            SgNashMethod::ClosedForm => nash::solve_closed_form_with(reduced, &s, Variant::Derived),
            SgNashMethod::Tpbv => nash::solve_tpbv(reduced, &s),
            SgNashMethod::BestResponse => nash::solve_best_response(reduced, &s, BestResponseOptions::default()),
        };
        let sol = match result {
            Ok(r) => r,
            Err(e) => return fail(SgStatus::NumericalFailure, e.to_string()),
        };
        let leader_cost = stackelberg::leader_cost(reduced, &s, &sol.demands, sol.price.as_slice());
        put(
            out,
            SgSolution {
                interior: sol.interior,
                leader_cost,
                supply: s,
                demands: sol.demands,
                price: sol.price.into_vec(),
            },
        );
        SgStatus::Ok
    })
}

/// # Safety
/// `solution` must come from a solve call or be null.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_free(solution: *mut SgSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> SgStatus {
    if buf.is_null() {
        return fail(SgStatus::NullPointer, "null buffer");
    }
    if len < src.len() {
        return fail(
            SgStatus::BufferTooSmall,
            format!("buffer holds {len}, need {}", src.len()),
        );
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    SgStatus::Ok
}

/// Horizon `T`; supply has `T` entries, price `T + 1`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_horizon(solution: *const SgSolution, out: *mut usize) -> SgStatus {
    if solution.is_null() || out.is_null() {
        return fail(SgStatus::NullPointer, "null argument");
    }
    *out = (*solution).supply.len();
    SgStatus::Ok
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_num_users(solution: *const SgSolution, out: *mut usize) -> SgStatus {
    if solution.is_null() || out.is_null() {
        return fail(SgStatus::NullPointer, "null argument");
    }
    *out = (*solution).demands.len();
    SgStatus::Ok
}

/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_supply(solution: *const SgSolution, buf: *mut f64, len: usize) -> SgStatus {
    if solution.is_null() {
        return fail(SgStatus::NullPointer, "null solution");
    }
    copy_out(&(*solution).supply, buf, len)
}

/// Row-major `users x horizon`.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_demands(solution: *const SgSolution, buf: *mut f64, len: usize) -> SgStatus {
    if solution.is_null() {
        return fail(SgStatus::NullPointer, "null solution");
    }
    let flat: Vec<f64> = (*solution).demands.iter().flatten().copied().collect();
    copy_out(&flat, buf, len)
}

/// `T + 1` prices.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_price(solution: *const SgSolution, buf: *mut f64, len: usize) -> SgStatus {
    if solution.is_null() {
        return fail(SgStatus::NullPointer, "null solution");
    }
    copy_out(&(*solution).price, buf, len)
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_leader_cost(solution: *const SgSolution, out: *mut f64) -> SgStatus {
    if solution.is_null() || out.is_null() {
        return fail(SgStatus::NullPointer, "null argument");
    }
    *out = (*solution).leader_cost;
    SgStatus::Ok
}

/// Writes 1 if every demand is positive (and, for Stackelberg, every supply nonnegative).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sg_solution_interior(solution: *const SgSolution, out: *mut i32) -> SgStatus {
    if solution.is_null() || out.is_null() {
        return fail(SgStatus::NullPointer, "null argument");
    }
    *out = i32::from((*solution).interior);
    SgStatus::Ok
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes. Returns the full message length plus one, so a
/// return value greater than `len` means truncation. `buf` may be null to
/// query the length.
///
/// # Safety
/// `buf` must hold `len` bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn sg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
