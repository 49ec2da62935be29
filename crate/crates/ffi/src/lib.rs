//! C interface to the fellerdyn diagnostics.
//!
//! Every function returns an [`FdStatus`]; on failure the message is
//! available from `fd_last_error_message` on the same thread until the next
//! call. Strings returned through out-parameters are owned by the caller and
//! released with `fd_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fellerdyn::classify1d::{classify_fd_1d, ClassifyOptions};
use fellerdyn::ctmc::{birthdeath_rs_test, powerlaw_verdict};
use fellerdyn::model::Model;
use fellerdyn::report::{report_to_string, run, Command, RunConfig, RunError};
use fellerdyn::verdict::FdOutcome;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    NumericError = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdVerdict {
    FellerDynkin = 0,
    NotFellerDynkin = 1,
    Inconclusive = 2,
}

impl From<FdOutcome> for FdVerdict {
    fn from(o: FdOutcome) -> Self {
        match o {
            FdOutcome::FellerDynkin => FdVerdict::FellerDynkin,
            FdOutcome::NotFellerDynkin => FdVerdict::NotFellerDynkin,
            FdOutcome::Inconclusive => FdVerdict::Inconclusive,
        }
    }
}

/// Opaque validated model together with the knobs it was loaded with.
pub struct FdModel {
    config: RunConfig,
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: FdStatus, msg: impl Into<String>) -> FdStatus {
    set_error(msg);
    status
}

fn from_run_error(e: RunError) -> FdStatus {
    let status = match e.exit_code() {
        2 => FdStatus::NumericError,
        _ => FdStatus::ConfigError,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `FdStatus::Panic`.
fn guarded(f: impl FnOnce() -> FdStatus) -> FdStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FdStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, FdStatus> {
    if p.is_null() {
        return Err(fail(FdStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FdStatus::InvalidUtf8, "argument is not valid UTF-8"))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Parses a JSON run configuration (model plus optional knobs) and stores a
/// model handle in `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fd_model_load_json(json: *const c_char, out: *mut *mut FdModel) -> FdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FdStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let loaded = RunConfig::from_json(text).and_then(|config| {
            let model = config.load_model()?;
            Ok(FdModel { config, model })
        });
        match loaded {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                FdStatus::Ok
            }
            Err(e) => from_run_error(e),
        }
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must come from `fd_model_load_json` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fd_model_free(model: *mut FdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Spatial dimension of a loaded model, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fd_model_dimension(model: *const FdModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.dim())
}

/// One-dimensional exact classification.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fd_classify1d(model: *const FdModel, out: *mut FdVerdict) -> FdStatus {
    guarded(|| {
        let (Some(m), false) = (model.as_ref(), out.is_null()) else {
            return fail(FdStatus::NullPointer, "null model or output pointer");
        };
        let k = &m.config.knobs;
        let opts = ClassifyOptions {
            ladder: k.ladder.clone(),
            tol: k.tol,
            ..ClassifyOptions::default()
        };
        match classify_fd_1d(&m.model, &opts) {
            Ok(v) => {
                *out = v.outcome.into();
                FdStatus::Ok
            }
            Err(e) => from_run_error(e.into()),
        }
    })
}

/// Closed-form verdict for birth rates `n^α λ` and death rates `n^α μ`:
/// `*out_fd` is true when the chain is Feller-Dynkin.
///
/// # Safety
/// `out_fd` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fd_birthdeath_powerlaw(alpha: f64, lambda: f64, mu: f64, out_fd: *mut bool) -> FdStatus {
    guarded(|| {
        if out_fd.is_null() {
            return fail(FdStatus::NullPointer, "null output pointer");
        }
        if !(lambda > 0.0 && mu > 0.0 && alpha.is_finite()) {
            return fail(FdStatus::ConfigError, "need lambda > 0, mu > 0 and finite alpha");
        }
        *out_fd = powerlaw_verdict(alpha, lambda, mu);
        FdStatus::Ok
    })
}

/// Numerical series verdict for the same chain with `n_terms` terms.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fd_birthdeath_rs(
    alpha: f64,
    lambda: f64,
    mu: f64,
    n_terms: usize,
    out: *mut FdVerdict,
) -> FdStatus {
    guarded(|| {
        if out.is_null() {
            return fail(FdStatus::NullPointer, "null output pointer");
        }
        if !(lambda > 0.0 && mu > 0.0 && alpha.is_finite()) || n_terms < 100 {
            return fail(FdStatus::ConfigError, "need lambda > 0, mu > 0, finite alpha and n_terms >= 100");
        }
        *out = match birthdeath_rs_test(alpha, lambda, mu, n_terms).both_diverge() {
            Some(true) => FdVerdict::FellerDynkin,
            Some(false) => FdVerdict::NotFellerDynkin,
            None => FdVerdict::Inconclusive,
        };
        FdStatus::Ok
    })
}

/// Runs a command-line subcommand (`"classify1d"`, `"radial"`, ...) on a JSON
/// configuration. On success `*out_report` holds the JSON report and
/// `*out_exit` the exit code the command-line tool would return.
///
/// # Safety
/// Strings must be NUL-terminated; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fd_run_json(
    command: *const c_char,
    config_json: *const c_char,
    out_report: *mut *mut c_char,
    out_exit: *mut i32,
) -> FdStatus {
    guarded(|| {
        if out_report.is_null() || out_exit.is_null() {
            return fail(FdStatus::NullPointer, "null output pointer");
        }
        *out_report = ptr::null_mut();
        let (name, text) = match (read_str(command), read_str(config_json)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let Some(cmd) = Command::from_name(name) else {
            *out_exit = 1;
            return fail(FdStatus::ConfigError, format!("unknown command `{name}`"));
        };
        match RunConfig::from_json(text).and_then(|c| run(cmd, &c, false)) {
            Ok(o) => {
                *out_exit = o.report.exit_code();
                *out_report = to_c_string(report_to_string(&o.report));
                FdStatus::Ok
            }
            Err(e) => {
                *out_exit = e.exit_code();
                from_run_error(e)
            }
        }
    })
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn fd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn fd_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}
