//! C ABI for the gclab numerical laboratory.
//!
//! Conventions:
//! - Handles (`GclabProblem`, `GclabSolution`, `GclabReport`) are opaque;
//!   create/free pairs own them, all other calls borrow.
//! - Every fallible call returns a `GclabStatus`; on failure the thread-local
//!   message from `gclab_last_error` describes the cause.
//! - Strings returned by the library are heap-allocated C strings released
//!   with `gclab_string_free`.
//!
//! The matching header lives in `include/gclab.h` and is maintained by hand
//! alongside this file.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::Path;
use std::ptr;

use gclab::cli::EigenCheckSection;
use gclab::estimator::{
    bound_report, measure_f_bounds_on_sigma, AuxiliaryConfig, EstimateReport, EstimatorError,
};
use gclab::fieldcalc::{write_field, Manufactured};
use gclab::solver::{newton_solve, InitialGuess, ProblemSpec, SolutionState, SolverConfig, SolverError};

/// Status codes shared with the CLI taxonomy; negative values are
/// FFI-specific usage errors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GclabStatus {
    Ok = 0,
    CheckFailed = 1,
    InvalidConfig = 2,
    RangeError = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    Io = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).ok();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

fn status_of_solver(e: &SolverError) -> GclabStatus {
    match e {
        SolverError::Field(_) | SolverError::BadConfig(_) | SolverError::TooFewLevels(_) => {
            GclabStatus::InvalidConfig
        }
        SolverError::BadCurvatureDatum { .. } => GclabStatus::InvalidConfig,
        _ => GclabStatus::CheckFailed,
    }
}

fn status_of_estimator(e: &EstimatorError) -> GclabStatus {
    match e {
        EstimatorError::WeightOverflow { .. } => GclabStatus::RangeError,
        _ => GclabStatus::InvalidConfig,
    }
}

/// Opaque discrete problem handle.
pub struct GclabProblem {
    kind: Manufactured,
    spec: ProblemSpec,
}

/// Opaque converged-solution handle.
pub struct GclabSolution {
    kind: Manufactured,
    spec: ProblemSpec,
    state: SolutionState,
}

/// Opaque estimate-report handle.
pub struct GclabReport {
    report: EstimateReport,
}

/// Last error message for this thread, or null when the previous call
/// succeeded. The pointer stays valid until the next failing call.
#[no_mangle]
pub extern "C" fn gclab_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |s| s.as_ptr())
    })
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn gclab_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

unsafe fn parse_name(name: *const c_char) -> Result<Manufactured, GclabStatus> {
    if name.is_null() {
        set_error("manufactured name is null");
        return Err(GclabStatus::NullPointer);
    }
    let text = match CStr::from_ptr(name).to_str() {
        Ok(t) => t,
        Err(_) => {
            set_error("manufactured name is not valid UTF-8");
            return Err(GclabStatus::InvalidUtf8);
        }
    };
    Manufactured::parse(text).map_err(|e| {
        set_error(e.to_string());
        GclabStatus::InvalidConfig
    })
}

/// Creates a manufactured Dirichlet problem on a radius-`radius` square grid
/// with `n_cells` cells per axis. Returns null on error.
///
/// # Safety
/// `name` must be a valid NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn gclab_problem_new(
    name: *const c_char,
    radius: c_double,
    n_cells: usize,
) -> *mut GclabProblem {
    clear_error();
    let kind = match parse_name(name) {
        Ok(k) => k,
        Err(_) => return ptr::null_mut(),
    };
    match ProblemSpec::from_manufactured(kind, radius, n_cells) {
        Ok(spec) => Box::into_raw(Box::new(GclabProblem { kind, spec })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `problem` must come from `gclab_problem_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gclab_problem_free(problem: *mut GclabProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Damped Newton solve from a seeded exact-perturbed start. On success
/// `*out` owns a new solution handle.
///
/// # Safety
/// `problem` must be a live handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gclab_solve(
    problem: *const GclabProblem,
    seed: u64,
    out: *mut *mut GclabSolution,
) -> GclabStatus {
    clear_error();
    if problem.is_null() || out.is_null() {
        set_error("null handle passed to gclab_solve");
        return GclabStatus::NullPointer;
    }
    let problem = &*problem;
    let config = SolverConfig {
        initial_guess: InitialGuess::ExactPerturbed { amplitude: 0.01, seed },
        ..SolverConfig::default()
    };
    match newton_solve(&problem.spec, &config) {
        Ok(state) => {
            *out = Box::into_raw(Box::new(GclabSolution {
                kind: problem.kind,
                spec: problem.spec.clone(),
                state,
            }));
            GclabStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of_solver(&e)
        }
    }
}

/// # Safety
/// `solution` must come from `gclab_solve` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gclab_solution_free(solution: *mut GclabSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// # Safety
/// `solution` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_solution_residual_norm(solution: *const GclabSolution) -> c_double {
    if solution.is_null() {
        return f64::NAN;
    }
    (*solution).state.residual_norm
}

/// # Safety
/// `solution` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_solution_iterations(solution: *const GclabSolution) -> c_int {
    if solution.is_null() {
        return -1;
    }
    (*solution).state.iterations as c_int
}

/// # Safety
/// `solution` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_solution_convexity_margin(
    solution: *const GclabSolution,
) -> c_double {
    if solution.is_null() {
        return f64::NAN;
    }
    (*solution).state.convexity_margin
}

/// Writes the solution field as `<base>.csv` plus `<base>.json` metadata.
///
/// # Safety
/// `solution` must be a live handle; `path_base` a valid string.
#[no_mangle]
pub unsafe extern "C" fn gclab_solution_write_csv(
    solution: *const GclabSolution,
    path_base: *const c_char,
) -> GclabStatus {
    clear_error();
    if solution.is_null() || path_base.is_null() {
        set_error("null handle passed to gclab_solution_write_csv");
        return GclabStatus::NullPointer;
    }
    let path = match CStr::from_ptr(path_base).to_str() {
        Ok(p) => p,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return GclabStatus::InvalidUtf8;
        }
    };
    match write_field(&(*solution).state.u, Path::new(path)) {
        Ok(()) => GclabStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            GclabStatus::Io
        }
    }
}

/// Builds the interior-bound estimate report. Pass `m <= 0` (and/or
/// `big_m <= 0`) to measure the bound over the run's Sigma nodes.
///
/// # Safety
/// `solution` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gclab_estimate(
    solution: *const GclabSolution,
    m: c_double,
    big_m: c_double,
    out: *mut *mut GclabReport,
) -> GclabStatus {
    clear_error();
    if solution.is_null() || out.is_null() {
        set_error("null handle passed to gclab_estimate");
        return GclabStatus::NullPointer;
    }
    let sol = &*solution;
    let measured = if m > 0.0 && big_m > 0.0 {
        None
    } else {
        match measure_f_bounds_on_sigma(&sol.state.u, sol.kind, sol.spec.radius, 1e-9) {
            Ok(pair) => Some(pair),
            Err(e) => {
                set_error(e.to_string());
                return status_of_estimator(&e);
            }
        }
    };
    let m = if m > 0.0 { m } else { measured.expect("measured").0 };
    let big_m = if big_m > 0.0 { big_m } else { measured.expect("measured").1 };
    let config = match AuxiliaryConfig::new(sol.spec.radius, m, big_m) {
        Ok(c) => c,
        Err(e) => {
            set_error(e.to_string());
            return status_of_estimator(&e);
        }
    };
    match bound_report(&sol.state, &sol.spec, &config) {
        Ok(report) => {
            *out = Box::into_raw(Box::new(GclabReport { report }));
            GclabStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            status_of_estimator(&e)
        }
    }
}

/// # Safety
/// `report` must come from `gclab_estimate` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_free(report: *mut GclabReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_phi_max(report: *const GclabReport) -> c_double {
    if report.is_null() {
        return f64::NAN;
    }
    (*report).report.phi_max
}

/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_eta_lambda1_max(report: *const GclabReport) -> c_double {
    if report.is_null() {
        return f64::NAN;
    }
    (*report).report.eta_lambda1_max
}

/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_bound_at_origin(report: *const GclabReport) -> c_double {
    if report.is_null() {
        return f64::NAN;
    }
    (*report).report.bound_at_origin
}

/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_u_tau_tau_origin(report: *const GclabReport) -> c_double {
    if report.is_null() {
        return f64::NAN;
    }
    (*report).report.u_tau_tau_origin
}

/// Argmax coordinates of phi; rim flag is 1 when the argmax touches the
/// Sigma rim.
///
/// # Safety
/// `report` must be a live handle; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_argmax(
    report: *const GclabReport,
    x1: *mut c_double,
    x2: *mut c_double,
    rim_adjacent: *mut c_int,
) -> GclabStatus {
    if report.is_null() || x1.is_null() || x2.is_null() || rim_adjacent.is_null() {
        set_error("null pointer passed to gclab_report_argmax");
        return GclabStatus::NullPointer;
    }
    let info = (*report).report.x0;
    *x1 = info.x[0];
    *x2 = info.x[1];
    *rim_adjacent = info.rim_adjacent as c_int;
    GclabStatus::Ok
}

/// 1 when both chain inequalities of the origin bound hold.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_chain_holds(report: *const GclabReport) -> c_int {
    if report.is_null() {
        return -1;
    }
    let r = &(*report).report;
    (r.origin_chain_holds && r.directional_chain_holds) as c_int
}

/// Full report serialized as JSON; free with `gclab_string_free`.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gclab_report_json(report: *const GclabReport) -> *mut c_char {
    clear_error();
    if report.is_null() {
        set_error("null report handle");
        return ptr::null_mut();
    }
    match serde_json::to_string_pretty(&(*report).report) {
        Ok(text) => match CString::new(text) {
            Ok(c) => c.into_raw(),
            Err(_) => {
                set_error("report JSON contained interior NUL");
                ptr::null_mut()
            }
        },
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn gclab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Summary of the eigen-derivative verification suite.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GclabEigenCheckSummary {
    pub max_first: c_double,
    pub max_second: c_double,
    pub degenerate_errors: usize,
    pub passed: c_int,
}

/// Runs the oracle-vs-formula suite over random symmetric matrices with
/// pairwise eigenvalue gap at least `gap_min` and entries in
/// [-entry_range, entry_range].
///
/// # Safety
/// `dims` must point to `n_dims` valid entries; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gclab_eigen_check(
    dims: *const usize,
    n_dims: usize,
    matrices_per_dim: usize,
    gap_min: c_double,
    step: c_double,
    seed: u64,
    out: *mut GclabEigenCheckSummary,
) -> GclabStatus {
    clear_error();
    if dims.is_null() || out.is_null() {
        set_error("null pointer passed to gclab_eigen_check");
        return GclabStatus::NullPointer;
    }
    let dims = std::slice::from_raw_parts(dims, n_dims).to_vec();
    let section = EigenCheckSection {
        dims,
        matrices_per_dim,
        gap_min,
        step,
        ..EigenCheckSection::default()
    };
    match gclab::cli::run_eigen_check(&section, seed) {
        Ok((disc, degenerate, _, _)) => {
            let passed = disc.max_first() <= section.tol_first
                && disc.max_second() <= section.tol_second
                && degenerate == 0;
            *out = GclabEigenCheckSummary {
                max_first: disc.max_first(),
                max_second: disc.max_second(),
                degenerate_errors: degenerate,
                passed: passed as c_int,
            };
            GclabStatus::Ok
        }
        Err(failure) => {
            set_error(failure.message);
            GclabStatus::InvalidConfig
        }
    }
}
