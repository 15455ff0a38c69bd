//! C ABI over the backward LQ solver: opaque handles, status codes, and a
//! thread-local last-error message. Every function is panic-safe and returns
//! [`BlqStatus`]; results come back through out-parameters.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use blq::bsde::ControlProcess;
use blq::grid::{PathEnsemble, TimeGrid};
use blq::pipeline::{solve_problem, verify_optimality, RouteChoice, SolveOutput, VerifySettings};
use blq::problem::ProblemInstance;
use blq::regression::RegressionBasis;
use blq::Error;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlqStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ValidationError = 4,
    SolverError = 5,
    VerificationFailed = 6,
    IoError = 7,
    Panic = 8,
}

fn status_of(err: &Error) -> BlqStatus {
    match err {
        Error::Parse { .. } | Error::Json(_) => BlqStatus::ParseError,
        Error::Validation(_) | Error::Dimension(_) => BlqStatus::ValidationError,
        Error::Io(_) => BlqStatus::IoError,
        Error::Stage { source, .. } => status_of(source),
        _ => BlqStatus::SolverError,
    }
}

/// Riccati route selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlqRoute {
    Auto = 0,
    Ode = 1,
    Eps = 2,
    Markov = 3,
}

/// Solver configuration; `degree` and `rational` describe the regression
/// basis, `eps_*` only matter for the eps route.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BlqSolveOptions {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub degree: u32,
    pub rational: bool,
    pub route: BlqRoute,
}

impl BlqSolveOptions {
    fn basis(&self) -> RegressionBasis {
        if self.rational {
            RegressionBasis::with_rational(self.degree as usize)
        } else {
            RegressionBasis::polynomial(self.degree as usize)
        }
    }

    fn route(&self) -> RouteChoice {
        match self.route {
            BlqRoute::Auto => RouteChoice::Auto,
            BlqRoute::Ode => RouteChoice::Ode,
            BlqRoute::Eps => RouteChoice::Eps,
            BlqRoute::Markov => RouteChoice::Markov,
        }
    }
}

/// Default options: K=100, M=10^4, seed 1, degree-4 basis with the rational
/// feature, automatic route.
#[no_mangle]
pub extern "C" fn blq_solve_options_default() -> BlqSolveOptions {
    BlqSolveOptions {
        steps: 100,
        paths: 10_000,
        seed: 1,
        degree: 4,
        rational: true,
        route: BlqRoute::Auto,
    }
}

/// Opaque problem handle.
pub struct BlqProblem {
    inner: ProblemInstance,
}

/// Opaque solution handle.
pub struct BlqSolution {
    problem: ProblemInstance,
    paths: PathEnsemble,
    basis: RegressionBasis,
    output: SolveOutput,
}

/// Message describing the most recent failure on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn blq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, BlqStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(BlqStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        BlqStatus::InvalidUtf8
    })
}

fn guard<F: FnOnce() -> BlqStatus>(body: F) -> BlqStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            BlqStatus::Panic
        }
    }
}

fn new_problem(inner: ProblemInstance, out: *mut *mut BlqProblem) -> BlqStatus {
    unsafe {
        *out = Box::into_raw(Box::new(BlqProblem { inner }));
    }
    BlqStatus::Ok
}

/// Parse a problem definition from a JSON string.
///
/// # Safety
/// `json` must point to a NUL-terminated string and `out` must be a valid
/// pointer; the returned handle is released with [`blq_problem_free`].
#[no_mangle]
pub unsafe extern "C" fn blq_problem_from_json(
    json: *const c_char,
    out: *mut *mut BlqProblem,
) -> BlqStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return BlqStatus::NullArgument;
        }
        let text = match read_utf8(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ProblemInstance::from_json_str(text) {
            Ok(p) => new_problem(p, out),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Load a problem definition from a JSON file.
///
/// # Safety
/// See [`blq_problem_from_json`].
#[no_mangle]
pub unsafe extern "C" fn blq_problem_load(
    path: *const c_char,
    out: *mut *mut BlqProblem,
) -> BlqStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return BlqStatus::NullArgument;
        }
        let path = match read_utf8(path) {
            Ok(t) => PathBuf::from(t),
            Err(s) => return s,
        };
        match ProblemInstance::load(&path) {
            Ok(p) => new_problem(p, out),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a problem handle. Null is ignored.
///
/// # Safety
/// `p` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn blq_problem_free(p: *mut BlqProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// State and control dimensions of a problem.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn blq_problem_dims(
    p: *const BlqProblem,
    state_dim: *mut usize,
    control_dim: *mut usize,
) -> BlqStatus {
    guard(|| {
        if p.is_null() || state_dim.is_null() || control_dim.is_null() {
            set_error("null argument");
            return BlqStatus::NullArgument;
        }
        *state_dim = (*p).inner.n;
        *control_dim = (*p).inner.m;
        BlqStatus::Ok
    })
}

/// Audit the standing assumptions on the default sample grid.
///
/// # Safety
/// `p` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn blq_problem_validate(p: *const BlqProblem) -> BlqStatus {
    guard(|| {
        if p.is_null() {
            set_error("null problem");
            return BlqStatus::NullArgument;
        }
        let inner = &(*p).inner;
        let report = inner.validate_assumptions(&inner.default_sample_grid());
        if report.all_ok() {
            BlqStatus::Ok
        } else {
            set_error(&format!(
                "assumptions violated: h1={} h2={} h3={}",
                report.h1_ok, report.h2_ok, report.h3_ok
            ));
            BlqStatus::ValidationError
        }
    })
}

/// Run the solve pipeline; on success `out` owns a solution handle.
///
/// # Safety
/// `p` must be a valid handle; `opts` may be null (defaults apply); `out`
/// must be valid. Release the solution with [`blq_solution_free`].
#[no_mangle]
pub unsafe extern "C" fn blq_solve(
    p: *const BlqProblem,
    opts: *const BlqSolveOptions,
    out: *mut *mut BlqSolution,
) -> BlqStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            set_error("null argument");
            return BlqStatus::NullArgument;
        }
        let problem = (*p).inner.clone();
        let options = if opts.is_null() {
            blq_solve_options_default()
        } else {
            *opts
        };
        let run = || -> Result<BlqSolution, Error> {
            let grid = TimeGrid::new(problem.t0, problem.t_end, options.steps)?;
            let paths = PathEnsemble::generate(grid, options.paths, options.seed)?;
            let basis = options.basis();
            let output = solve_problem(
                &problem,
                &paths,
                &basis,
                options.route(),
                &[1.0, 0.1, 0.01, 0.001],
            )?;
            Ok(BlqSolution {
                problem: problem.clone(),
                paths,
                basis,
                output,
            })
        };
        match run() {
            Ok(sol) => {
                *out = Box::into_raw(Box::new(sol));
                BlqStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a solution handle. Null is ignored.
///
/// # Safety
/// `s` must come from [`blq_solve`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn blq_solution_free(s: *mut BlqSolution) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// L2 norm of the solved optimal control.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn blq_solution_control_norm(
    s: *const BlqSolution,
    out: *mut f64,
) -> BlqStatus {
    guard(|| {
        if s.is_null() || out.is_null() {
            set_error("null argument");
            return BlqStatus::NullArgument;
        }
        *out = (*s).output.triple.u.l2_norm();
        BlqStatus::Ok
    })
}

/// Monte Carlo cost of the solved control and its standard error.
///
/// # Safety
/// `s` must be valid; either output pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn blq_solution_cost(
    s: *const BlqSolution,
    total: *mut f64,
    stderr: *mut f64,
) -> BlqStatus {
    guard(|| {
        if s.is_null() {
            set_error("null solution");
            return BlqStatus::NullArgument;
        }
        if !total.is_null() {
            *total = (*s).output.cost.total;
        }
        if !stderr.is_null() {
            *stderr = (*s).output.cost.stderr;
        }
        BlqStatus::Ok
    })
}

/// Number of grid steps of the solved problem.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn blq_solution_steps(s: *const BlqSolution, out: *mut usize) -> BlqStatus {
    guard(|| {
        if s.is_null() || out.is_null() {
            set_error("null argument");
            return BlqStatus::NullArgument;
        }
        *out = (*s).output.triple.grid.steps();
        BlqStatus::Ok
    })
}

/// Path-averaged Riccati solution slice at a grid step, written row-major
/// into `buf` (length at least n*n).
///
/// # Safety
/// `buf` must point to at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn blq_solution_sigma_mean(
    s: *const BlqSolution,
    step: usize,
    buf: *mut f64,
    len: usize,
) -> BlqStatus {
    guard(|| {
        if s.is_null() || buf.is_null() {
            set_error("null argument");
            return BlqStatus::NullArgument;
        }
        let sol = &*s;
        let n = sol.problem.n;
        if len < n * n {
            set_error(&format!("buffer holds {len} entries, need {}", n * n));
            return BlqStatus::ValidationError;
        }
        if step > sol.output.triple.grid.steps() {
            set_error(&format!("step {step} out of range"));
            return BlqStatus::ValidationError;
        }
        let m_paths = if sol.output.sigma.is_deterministic() {
            1
        } else {
            sol.paths.paths()
        };
        let mut mean = vec![0.0f64; n * n];
        for i in 0..m_paths {
            let sig = sol.output.sigma.sigma_at(step, i);
            for r in 0..n {
                for c in 0..n {
                    mean[r * n + c] += sig[(r, c)] / m_paths as f64;
                }
            }
        }
        for (j, v) in mean.iter().enumerate() {
            *buf.add(j) = *v;
        }
        BlqStatus::Ok
    })
}

/// Run the verification battery on a solved handle. Returns `Ok` when every
/// criterion passes and `VerificationFailed` otherwise; in both cases
/// `report_json`, when non-null, receives a JSON report to be released with
/// [`blq_string_free`].
///
/// # Safety
/// `s` must be a valid solution handle.
#[no_mangle]
pub unsafe extern "C" fn blq_verify(
    s: *const BlqSolution,
    report_json: *mut *mut c_char,
) -> BlqStatus {
    guard(|| {
        if s.is_null() {
            set_error("null solution");
            return BlqStatus::NullArgument;
        }
        let sol = &*s;
        let settings = VerifySettings {
            seed: sol.paths.seed(),
            ..VerifySettings::default()
        };
        match verify_optimality(
            &sol.problem,
            &sol.paths,
            &sol.output.triple,
            &sol.output.xi,
            &sol.basis,
            &settings,
        ) {
            Ok(report) => {
                if !report_json.is_null() {
                    let text = serde_json_string(&report);
                    *report_json = CString::new(text).unwrap().into_raw();
                }
                if report.all_pass() {
                    BlqStatus::Ok
                } else {
                    set_error("verification criteria failed");
                    BlqStatus::VerificationFailed
                }
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).unwrap_or_else(|_| "{}".to_string())
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn blq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Evaluate the cost of the zero control, a quick smoke entry point for
/// bindings.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn blq_zero_control_cost(
    p: *const BlqProblem,
    opts: *const BlqSolveOptions,
    out: *mut f64,
) -> BlqStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            set_error("null argument");
            return BlqStatus::NullArgument;
        }
        let problem = &(*p).inner;
        let options = if opts.is_null() {
            blq_solve_options_default()
        } else {
            *opts
        };
        let run = || -> Result<f64, Error> {
            let grid = TimeGrid::new(problem.t0, problem.t_end, options.steps)?;
            let paths = PathEnsemble::generate(grid, options.paths, options.seed)?;
            let u = ControlProcess::zeros(grid, options.paths, problem.m);
            let xi = problem.xi_values(&paths.step_values(grid.steps()))?;
            let cost = blq::cost::evaluate_cost(problem, &paths, &u, &xi, &options.basis())?;
            Ok(cost.total)
        };
        match run() {
            Ok(v) => {
                *out = v;
                BlqStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
