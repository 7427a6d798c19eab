//! C ABI for the irregular-LQ solver.
//!
//! Problems and solutions are opaque handles created and destroyed through
//! this interface; every fallible call returns an [`IrlqStatus`] and the
//! last failure message is retrievable per thread via
//! [`irlq_last_error_message`]. Strings returned through out-pointers are
//! heap-allocated and must be released with [`irlq_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};

use irlq::model::{self, LQProblem};
use irlq::pipeline::{run_classify, run_solve, Mode, SolveOptions, SolveOutcome, Tolerances};
use irlq::reduce::Verdict;
use irlq::sim::trajectory_to_csv;
use irlq::SolverError;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrlqStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Malformed input: bad JSON, bad dimensions, inadmissible data.
    InvalidInput = 2,
    /// The solve finished with an unsolvable verdict (the solution handle is
    /// still produced and carries the report).
    Unsolvable = 3,
    /// Integration diverged or a matrix was numerically singular.
    NumericalFailure = 4,
    /// The requested value does not exist on this solution (for example a
    /// trajectory on an unsolvable run).
    Unavailable = 5,
}

/// Controller selection strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IrlqMode {
    Auto = 0,
    Open = 1,
    Closed = 2,
}

/// Solver tolerances; obtain defaults from [`irlq_tolerances_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IrlqTolerances {
    pub rank: f64,
    pub gamma: f64,
    pub range: f64,
}

/// Opaque problem handle.
pub struct IrlqProblem {
    inner: LQProblem,
}

/// Opaque solution handle holding the report and, when produced, the
/// simulated trajectory.
pub struct IrlqSolution {
    outcome: SolveOutcome,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let cstring = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|cell| *cell.borrow_mut() = cstring);
}

fn status_of(err: &SolverError) -> IrlqStatus {
    match err {
        SolverError::Input(_) | SolverError::RankVariation(_) | SolverError::Misuse(_) => {
            IrlqStatus::InvalidInput
        }
        SolverError::Divergence { .. } | SolverError::Conditioning(_) => {
            IrlqStatus::NumericalFailure
        }
    }
}

fn fail(err: &SolverError) -> IrlqStatus {
    set_last_error(&err.to_string());
    status_of(err)
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated C string.
unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, IrlqStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(IrlqStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8");
        IrlqStatus::InvalidInput
    })
}

fn string_out(text: String, out: *mut *mut c_char) -> IrlqStatus {
    match CString::new(text) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            IrlqStatus::Ok
        }
        Err(_) => {
            set_last_error("output text contains a NUL byte");
            IrlqStatus::InvalidInput
        }
    }
}

/// Message of the most recent failure on this thread; the pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn irlq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|cell| cell.borrow().as_ptr())
}

/// Default tolerances (rank 1e-9, gamma 1e-6, range 1e-8).
#[no_mangle]
pub extern "C" fn irlq_tolerances_default() -> IrlqTolerances {
    let t = Tolerances::default();
    IrlqTolerances {
        rank: t.rank,
        gamma: t.gamma,
        range: t.range,
    }
}

/// Parse a problem from a JSON document (same schema as the CLI files).
///
/// # Safety
/// `json` must be a valid NUL-terminated C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irlq_problem_from_json(
    json: *const c_char,
    out: *mut *mut IrlqProblem,
) -> IrlqStatus {
    if out.is_null() {
        set_last_error("null output pointer");
        return IrlqStatus::NullPointer;
    }
    let text = match cstr_arg(json) {
        Ok(t) => t,
        Err(status) => return status,
    };
    match model::problem_from_json(text) {
        Ok(problem) => {
            *out = Box::into_raw(Box::new(IrlqProblem { inner: problem }));
            IrlqStatus::Ok
        }
        Err(err) => fail(&err),
    }
}

/// Build a named fixture ("E1" or "E2") with the given grid resolution
/// (0 selects the default of 1000 cells).
///
/// # Safety
/// `name` must be a valid NUL-terminated C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn irlq_problem_fixture(
    name: *const c_char,
    steps: usize,
    out: *mut *mut IrlqProblem,
) -> IrlqStatus {
    if out.is_null() {
        set_last_error("null output pointer");
        return IrlqStatus::NullPointer;
    }
    let name = match cstr_arg(name) {
        Ok(t) => t,
        Err(status) => return status,
    };
    let which: model::Fixture = match name.parse() {
        Ok(w) => w,
        Err(err) => return fail(&err),
    };
    let steps = if steps == 0 {
        model::DEFAULT_STEPS
    } else {
        steps
    };
    *out = Box::into_raw(Box::new(IrlqProblem {
        inner: model::fixture(which, steps),
    }));
    IrlqStatus::Ok
}

/// Serialize a problem back to canonical JSON.
///
/// # Safety
/// `problem` must be a live handle from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irlq_problem_to_json(
    problem: *const IrlqProblem,
    out: *mut *mut c_char,
) -> IrlqStatus {
    if problem.is_null() || out.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    string_out(model::problem_to_json(&(*problem).inner), out)
}

/// Release a problem handle. Null is ignored.
///
/// # Safety
/// `problem` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn irlq_problem_free(problem: *mut IrlqProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Classify a problem: `is_regular` receives the verdict and `m0` the rank
/// of the control weight.
///
/// # Safety
/// All pointers must be valid; `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn irlq_classify(
    problem: *const IrlqProblem,
    tolerances: IrlqTolerances,
    is_regular: *mut bool,
    m0: *mut usize,
) -> IrlqStatus {
    if problem.is_null() || is_regular.is_null() || m0.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    let tol = Tolerances {
        rank: tolerances.rank,
        gamma: tolerances.gamma,
        range: tolerances.range,
    };
    match run_classify(&(*problem).inner, &tol) {
        Ok((verdict, rank)) => {
            *is_regular = verdict == Verdict::Regular;
            *m0 = rank;
            IrlqStatus::Ok
        }
        Err(err) => fail(&err),
    }
}

/// Run the full pipeline. On `Ok` and `Unsolvable` a solution handle is
/// written to `out`; on other statuses nothing is produced.
///
/// # Safety
/// All pointers must be valid; `problem` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn irlq_solve(
    problem: *const IrlqProblem,
    mode: IrlqMode,
    tolerances: IrlqTolerances,
    out: *mut *mut IrlqSolution,
) -> IrlqStatus {
    if problem.is_null() || out.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    let opts = SolveOptions {
        mode: match mode {
            IrlqMode::Auto => Mode::Auto,
            IrlqMode::Open => Mode::Open,
            IrlqMode::Closed => Mode::Closed,
        },
        tolerances: Tolerances {
            rank: tolerances.rank,
            gamma: tolerances.gamma,
            range: tolerances.range,
        },
        ..Default::default()
    };
    match run_solve(&(*problem).inner, &opts) {
        Ok(outcome) => {
            let solved = outcome.solved;
            *out = Box::into_raw(Box::new(IrlqSolution { outcome }));
            if solved {
                IrlqStatus::Ok
            } else {
                set_last_error("no certified controller; see the report");
                IrlqStatus::Unsolvable
            }
        }
        Err(err) => fail(&err),
    }
}

/// Whether the run produced a certified controller.
///
/// # Safety
/// `solution` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irlq_solution_solved(
    solution: *const IrlqSolution,
    out: *mut bool,
) -> IrlqStatus {
    if solution.is_null() || out.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    *out = (*solution).outcome.solved;
    IrlqStatus::Ok
}

/// Achieved cost, when a controller was produced.
///
/// # Safety
/// `solution` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irlq_solution_cost(
    solution: *const IrlqSolution,
    out: *mut f64,
) -> IrlqStatus {
    if solution.is_null() || out.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    match (*solution).outcome.report.cost {
        Some(cost) => {
            *out = cost;
            IrlqStatus::Ok
        }
        None => {
            set_last_error("no cost: the run produced no controller");
            IrlqStatus::Unavailable
        }
    }
}

/// Machine-readable report (JSON), identical to the CLI sidecar.
///
/// # Safety
/// `solution` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irlq_solution_report_json(
    solution: *const IrlqSolution,
    out: *mut *mut c_char,
) -> IrlqStatus {
    if solution.is_null() || out.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    string_out((*solution).outcome.report.to_json(), out)
}

/// Human-readable report, identical to the CLI text output.
///
/// # Safety
/// `solution` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irlq_solution_report_text(
    solution: *const IrlqSolution,
    out: *mut *mut c_char,
) -> IrlqStatus {
    if solution.is_null() || out.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    string_out((*solution).outcome.report.to_text(), out)
}

/// Simulated trajectory as CSV (same layout as the CLI artifact).
///
/// # Safety
/// `solution` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn irlq_solution_trajectory_csv(
    solution: *const IrlqSolution,
    out: *mut *mut c_char,
) -> IrlqStatus {
    if solution.is_null() || out.is_null() {
        set_last_error("null argument");
        return IrlqStatus::NullPointer;
    }
    match &(*solution).outcome.trajectory {
        Some(traj) => string_out(trajectory_to_csv(traj), out),
        None => {
            set_last_error("no trajectory: the run produced no controller");
            IrlqStatus::Unavailable
        }
    }
}

/// Release a solution handle. Null is ignored.
///
/// # Safety
/// `solution` must be null or a live handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn irlq_solution_free(solution: *mut IrlqSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `text` must be null or a pointer previously returned through one of the
/// `out` string parameters, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn irlq_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}
