//! C ABI over `flexo-core`.
//!
//! Handles are opaque and owned by the caller once returned; release each with
//! its `_free` function. Every fallible call returns a [`FlexoStatus`] and, on
//! failure, stores a message retrievable with [`flexo_last_error_message`] on
//! the same thread. Arrays are caller-allocated and sized by `n` (users) or
//! `c` (affine rows).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use flexo_core::flexo::{run_flexo, FlexibleAssignment};
use flexo_core::harness::{frozen_scenario, Scenario};
use flexo_core::problem::{vertex_feasibility_oracle, Decision, FlexProblem, SOLVER_FEAS_TOL};
use flexo_core::robust::{build_reformulation, solve_reformulation, SolverSettings};
use flexo_core::FlexError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlexoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonConvergence = 3,
    Io = 4,
    Panic = 5,
}

/// Problem data: cost, reference point, ball radius and affine rows.
pub struct FlexoProblem(FlexProblem);

/// A scenario: problem, chance parameters, search region, models and settings.
pub struct FlexoScenario(Scenario);

/// Output of the full workflow.
pub struct FlexoAssignment(FlexibleAssignment);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn status_of(err: &FlexError) -> FlexoStatus {
    match err {
        FlexError::NonConvergence { .. } => FlexoStatus::NonConvergence,
        FlexError::Stage { source, .. } => status_of(source),
        FlexError::Io(_) => FlexoStatus::Io,
        _ => FlexoStatus::InvalidArgument,
    }
}

fn fail(status: FlexoStatus, message: impl Into<String>) -> FlexoStatus {
    set_error(message.into());
    status
}

/// Runs `body`, mapping errors and panics to status codes.
fn guarded(body: impl FnOnce() -> Result<(), (FlexoStatus, String)>) -> FlexoStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            FlexoStatus::Ok
        }
        Ok(Err((status, message))) => fail(status, message),
        Err(_) => fail(FlexoStatus::Panic, "internal panic"),
    }
}

fn core_err(err: FlexError) -> (FlexoStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (FlexoStatus, String) {
    (FlexoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn input<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], (FlexoStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (FlexoStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

fn check_n(expected: usize, got: usize) -> Result<(), (FlexoStatus, String)> {
    if expected == got {
        Ok(())
    } else {
        Err((
            FlexoStatus::InvalidArgument,
            format!("array length {got} does not match problem size {expected}"),
        ))
    }
}

fn write_decision(decision: &Decision, x_out: &mut [f64], beta_out: &mut [f64]) {
    x_out.copy_from_slice(decision.x());
    beta_out.copy_from_slice(decision.beta());
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn flexo_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let message = e.borrow();
        if !buf.is_null() && len > 0 {
            let k = message.len().min(len - 1);
            ptr::copy_nonoverlapping(message.as_ptr(), buf.cast::<u8>(), k);
            *buf.add(k) = 0;
        }
        message.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn flexo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a problem. `d` is the row-major `c x n` affine matrix.
///
/// # Safety
/// `weights` and `x_ref` must hold `n` values, `d` `c * n` values, `e` `c`
/// values, and `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn flexo_problem_new(
    n: usize,
    eps_x: f64,
    eps_beta: f64,
    weights: *const f64,
    x_ref: *const f64,
    gamma: f64,
    c: usize,
    d: *const f64,
    e: *const f64,
    out: *mut *mut FlexoProblem,
) -> FlexoStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let weights = input(weights, n, "weights")?.to_vec();
        let x_ref = input(x_ref, n, "x_ref")?.to_vec();
        let rows = input(d, c * n, "d")?.chunks(n.max(1)).take(c).map(<[f64]>::to_vec).collect();
        let e = input(e, c, "e")?.to_vec();
        let problem = FlexProblem::new(eps_x, eps_beta, weights, x_ref, gamma, rows, e).map_err(core_err)?;
        *out = Box::into_raw(Box::new(FlexoProblem(problem)));
        Ok(())
    })
}

/// # Safety
/// `problem` must be null or a handle from [`flexo_problem_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn flexo_problem_free(problem: *mut FlexoProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of users of a problem, or 0 for a null handle.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flexo_problem_users(problem: *const FlexoProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.0.n())
}

/// Solves the hyperbox-robust problem with default solver settings.
///
/// # Safety
/// `problem` must be a live handle; `x_out` and `beta_out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn flexo_robust_solve(
    problem: *const FlexoProblem,
    n: usize,
    x_out: *mut f64,
    beta_out: *mut f64,
) -> FlexoStatus {
    guarded(|| {
        let p = &problem.as_ref().ok_or_else(|| null("problem"))?.0;
        check_n(p.n(), n)?;
        let (x_out, beta_out) = (output(x_out, n, "x_out")?, output(beta_out, n, "beta_out")?);
        let report = solve_reformulation(&build_reformulation(p), &SolverSettings::default()).map_err(core_err)?;
        if !report.converged {
            return Err((
                FlexoStatus::NonConvergence,
                format!("robust solve stopped at KKT residual {:e}", report.kkt_residual),
            ));
        }
        write_decision(&report.decision, x_out, beta_out);
        Ok(())
    })
}

/// Vertex-oracle feasibility of `(x, beta)`; writes the verdict (1 or 0) and
/// the worst constraint margin.
///
/// # Safety
/// `problem` must be a live handle, `x` and `beta` must hold `n` values and
/// the output pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn flexo_check_decision(
    problem: *const FlexoProblem,
    n: usize,
    x: *const f64,
    beta: *const f64,
    feasible_out: *mut i32,
    worst_margin_out: *mut f64,
) -> FlexoStatus {
    guarded(|| {
        let p = &problem.as_ref().ok_or_else(|| null("problem"))?.0;
        check_n(p.n(), n)?;
        if feasible_out.is_null() || worst_margin_out.is_null() {
            return Err(null("output pointer"));
        }
        let y = Decision::new(input(x, n, "x")?.to_vec(), input(beta, n, "beta")?.to_vec()).map_err(core_err)?;
        let cert = vertex_feasibility_oracle(p, &y, SOLVER_FEAS_TOL).map_err(core_err)?;
        *feasible_out = i32::from(cert.feasible);
        *worst_margin_out = cert.worst_margin;
        Ok(())
    })
}

/// Parses a scenario from NUL-terminated TOML text.
///
/// # Safety
/// `toml` must be a valid C string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn flexo_scenario_from_toml(toml: *const c_char, out: *mut *mut FlexoScenario) -> FlexoStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if toml.is_null() {
            return Err(null("toml"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| (FlexoStatus::InvalidArgument, format!("scenario is not UTF-8: {e}")))?;
        let scenario = Scenario::from_toml_str(text).map_err(core_err)?;
        *out = Box::into_raw(Box::new(FlexoScenario(scenario)));
        Ok(())
    })
}

/// The frozen seven-user scenario used by the command-line defaults.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn flexo_scenario_frozen(out: *mut *mut FlexoScenario) -> FlexoStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(FlexoScenario(frozen_scenario())));
        Ok(())
    })
}

/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flexo_scenario_free(scenario: *mut FlexoScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Number of users of a scenario, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flexo_scenario_users(scenario: *const FlexoScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.0.problem.n())
}

/// Runs the workflow with `t` model-based steps and the scenario's guard and
/// rounding settings.
///
/// # Safety
/// `scenario` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn flexo_run_pipeline(
    scenario: *const FlexoScenario,
    t: usize,
    out: *mut *mut FlexoAssignment,
) -> FlexoStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let s = &scenario.as_ref().ok_or_else(|| null("scenario"))?.0;
        let (assignment, _) =
            run_flexo(&s.problem, &s.pipeline_config(t), Some(&s.models.truth), None).map_err(core_err)?;
        *out = Box::into_raw(Box::new(FlexoAssignment(assignment)));
        Ok(())
    })
}

/// Copies the assigned centres and radii.
///
/// # Safety
/// `assignment` must be a live handle; `x_out` and `beta_out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn flexo_assignment_decision(
    assignment: *const FlexoAssignment,
    n: usize,
    x_out: *mut f64,
    beta_out: *mut f64,
) -> FlexoStatus {
    guarded(|| {
        let a = &assignment.as_ref().ok_or_else(|| null("assignment"))?.0;
        check_n(a.decision.n(), n)?;
        write_decision(&a.decision, output(x_out, n, "x_out")?, output(beta_out, n, "beta_out")?);
        Ok(())
    })
}

/// `max_j E[h_j]` of the assignment under the true model.
///
/// # Safety
/// `assignment` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn flexo_assignment_cv(assignment: *const FlexoAssignment, out: *mut f64) -> FlexoStatus {
    guarded(|| {
        let a = &assignment.as_ref().ok_or_else(|| null("assignment"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = a.cv_estimate.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// # Safety
/// `assignment` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn flexo_assignment_free(assignment: *mut FlexoAssignment) {
    if !assignment.is_null() {
        drop(Box::from_raw(assignment));
    }
}
