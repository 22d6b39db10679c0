//! C ABI over the `shadagrad` library.
//!
//! Every function returns a [`ShgStatus`]. On failure a message is kept per
//! thread and can be read with [`shg_last_error`]. Handles are opaque and
//! owned by the caller, who releases them with the matching `_free`.
//! Strings returned through out-parameters are released with
//! [`shg_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use serde::Serialize;
use shadagrad::harness::{run_experiment, ExperimentConfig};
use shadagrad::history::{GradientHistory, Perturbation};
use shadagrad::optimizers::{run, EpochRow, OptimizerConfig};
use shadagrad::problems::{fd_check, Problem, ProblemSpec};
use shadagrad::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Shape = 4,
    Numerical = 5,
    Config = 6,
    Io = 7,
    GateExhausted = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A built problem instance.
pub struct ShgProblem {
    inner: Problem,
}

/// A running gradient history with its preconditioner.
pub struct ShgHistory {
    inner: GradientHistory,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> ShgStatus {
    match e {
        Error::Shape { .. } | Error::EmptyDimension | Error::Index { .. } | Error::EpochOverflow { .. } => {
            ShgStatus::Shape
        }
        Error::Config { .. } => ShgStatus::Config,
        Error::Io(_) => ShgStatus::Io,
        Error::GateExhausted { .. } => ShgStatus::GateExhausted,
        Error::InvalidArgument(_)
        | Error::InvalidRidge(_)
        | Error::Divisibility { .. }
        | Error::InsufficientSamples(_)
        | Error::SealTooEarly { .. }
        | Error::HistoryCap { .. }
        | Error::Incompatible(_) => ShgStatus::InvalidArgument,
        _ => ShgStatus::Numerical,
    }
}

struct Fail(ShgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ShgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ShgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ShgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ShgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(ShgStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Fail> {
    if len < need {
        return Err(Fail(ShgStatus::BufferTooSmall, format!("output buffer holds {len}, need {need}")));
    }
    if p.is_null() {
        return Err(null("output buffer"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|e| Fail(ShgStatus::InvalidArgument, e.to_string()))?;
    put(out, c.into_raw(), "output string")
}

fn json<T: Serialize>(v: &T) -> Result<String, Fail> {
    serde_json::to_string(v).map_err(|e| Fail(ShgStatus::Io, e.to_string()))
}

/// The message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn shg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn shg_status_name(status: ShgStatus) -> *const c_char {
    let s: &'static CStr = match status {
        ShgStatus::Ok => c"ok",
        ShgStatus::NullPointer => c"null_pointer",
        ShgStatus::InvalidUtf8 => c"invalid_utf8",
        ShgStatus::InvalidArgument => c"invalid_argument",
        ShgStatus::Shape => c"shape",
        ShgStatus::Numerical => c"numerical",
        ShgStatus::Config => c"config",
        ShgStatus::Io => c"io",
        ShgStatus::GateExhausted => c"gate_exhausted",
        ShgStatus::BufferTooSmall => c"buffer_too_small",
        ShgStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn shg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a problem from a JSON spec such as
/// `{"name": "quartic_sigmoid", "n": 128, "d": 16, "seed": 0}`.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_problem_from_json(spec_json: *const c_char, out: *mut *mut ShgProblem) -> ShgStatus {
    guard(|| {
        let text = str_arg(spec_json, "spec_json")?;
        let spec: ProblemSpec = serde_json::from_str(text).map_err(|e| Fail(ShgStatus::Config, e.to_string()))?;
        let p = spec.build()?;
        put(out, Box::into_raw(Box::new(ShgProblem { inner: p })), "out")
    })
}

/// # Safety
/// `p` must be null or a handle from [`shg_problem_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shg_problem_free(p: *mut ShgProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live handle; `n` and `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_problem_shape(p: *const ShgProblem, n: *mut usize, dim: *mut usize) -> ShgStatus {
    guard(|| {
        let p = &handle(p, "problem")?.inner;
        put(n, p.n(), "n")?;
        put(dim, p.dim(), "dim")
    })
}

/// Objective value at `x`.
///
/// # Safety
/// `x` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_problem_value(p: *const ShgProblem, x: *const f64, len: usize, out: *mut f64) -> ShgStatus {
    guard(|| {
        let p = &handle(p, "problem")?.inner;
        let v = p.value(slice_arg(x, len, "x")?)?;
        put(out, v, "out")
    })
}

/// Full gradient at `x` into `grad`, which must hold `dim` doubles.
///
/// # Safety
/// `x` must point to `len` doubles and `grad` to `grad_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn shg_problem_full_grad(
    p: *const ShgProblem,
    x: *const f64,
    len: usize,
    grad: *mut f64,
    grad_len: usize,
) -> ShgStatus {
    guard(|| {
        let p = &handle(p, "problem")?.inner;
        let g = p.full_grad(slice_arg(x, len, "x")?)?;
        out_slice(grad, grad_len, g.len())?[..g.len()].copy_from_slice(&g);
        Ok(())
    })
}

/// Mean gradient over the instances in `batch`.
///
/// # Safety
/// `batch` must point to `batch_len` indices, `x` to `len` doubles and
/// `grad` to `grad_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn shg_problem_batch_grad(
    p: *const ShgProblem,
    batch: *const usize,
    batch_len: usize,
    x: *const f64,
    len: usize,
    grad: *mut f64,
    grad_len: usize,
) -> ShgStatus {
    guard(|| {
        let p = &handle(p, "problem")?.inner;
        let g = p.batch_grad(slice_arg(batch, batch_len, "batch")?, slice_arg(x, len, "x")?)?;
        out_slice(grad, grad_len, g.len())?[..g.len()].copy_from_slice(&g);
        Ok(())
    })
}

/// Worst relative finite-difference error of the gradient at `x`.
///
/// # Safety
/// `x` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_problem_fd_check(
    p: *const ShgProblem,
    x: *const f64,
    len: usize,
    h: f64,
    out: *mut f64,
) -> ShgStatus {
    guard(|| {
        let p = &handle(p, "problem")?.inner;
        let v = fd_check(p, slice_arg(x, len, "x")?, h)?;
        put(out, v, "out")
    })
}

#[derive(Serialize)]
struct RunJson<'a> {
    complete: bool,
    failure: Option<&'a str>,
    rows: &'a [EpochRow],
    final_x: Option<&'a [f64]>,
}

/// Runs one optimizer configuration (JSON with the fields of
/// `OptimizerConfig`) and returns the per-epoch rows as JSON in `out_json`.
///
/// # Safety
/// `p` must be a live handle, `config_json` a NUL-terminated string and
/// `out_json` writable. Free the result with [`shg_string_free`].
#[no_mangle]
pub unsafe extern "C" fn shg_run(
    p: *const ShgProblem,
    config_json: *const c_char,
    epochs: usize,
    seed: u64,
    out_json: *mut *mut c_char,
) -> ShgStatus {
    guard(|| {
        let p = &handle(p, "problem")?.inner;
        let cfg: OptimizerConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| Fail(ShgStatus::Config, e.to_string()))?;
        let rec = run(p, &cfg, epochs, seed)?;
        let final_x = rec.trace.epochs.last().and_then(|e| e.iterates.last()).map(Vec::as_slice);
        let text = json(&RunJson {
            complete: rec.complete,
            failure: rec.failure.as_deref(),
            rows: &rec.rows,
            final_x,
        })?;
        put_string(out_json, text)
    })
}

/// Runs a full experiment config; `out_dir` may be null to use the config's.
/// The written index is returned as JSON in `out_json`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_experiment_run(
    config_json: *const c_char,
    out_dir: *const c_char,
    workers: usize,
    out_json: *mut *mut c_char,
) -> ShgStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(str_arg(config_json, "config_json")?)?;
        let dir = if out_dir.is_null() { None } else { Some(str_arg(out_dir, "out_dir")?) };
        let out = run_experiment(&cfg, dir.map(Path::new), (workers > 0).then_some(workers))?;
        put_string(out_json, json(&out.index)?)
    })
}

/// A history for `dim`-dimensional gradients and `m` steps per epoch.
/// A negative `fixed_delta` selects the adaptive perturbation.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_history_new(
    dim: usize,
    m: usize,
    gamma: f64,
    fixed_delta: f64,
    out: *mut *mut ShgHistory,
) -> ShgStatus {
    guard(|| {
        let pert = if fixed_delta < 0.0 {
            Perturbation::Adaptive
        } else {
            Perturbation::Fixed(fixed_delta)
        };
        let h = GradientHistory::new(dim, m, gamma, pert)?;
        put(out, Box::into_raw(Box::new(ShgHistory { inner: h })), "out")
    })
}

/// # Safety
/// `h` must be null or a handle from [`shg_history_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn shg_history_free(h: *mut ShgHistory) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle and `g` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn shg_history_push(h: *mut ShgHistory, g: *const f64, len: usize) -> ShgStatus {
    guard(|| {
        let h = &mut handle_mut(h, "history")?.inner;
        h.push(slice_arg(g, len, "g")?)?;
        Ok(())
    })
}

/// # Safety
/// `h` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn shg_history_seal_epoch(h: *mut ShgHistory) -> ShgStatus {
    guard(|| {
        handle_mut(h, "history")?.inner.seal_epoch()?;
        Ok(())
    })
}

/// `G^{-1/2} g` for the current history.
///
/// # Safety
/// `g` must point to `len` doubles, `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn shg_history_precondition(
    h: *const ShgHistory,
    g: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> ShgStatus {
    guard(|| {
        let h = &handle(h, "history")?.inner;
        let v = h.precondition(slice_arg(g, len, "g")?)?;
        out_slice(out, out_len, v.len())?[..v.len()].copy_from_slice(&v);
        Ok(())
    })
}

/// The current perturbation `delta`.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_history_delta(h: *const ShgHistory, out: *mut f64) -> ShgStatus {
    guard(|| {
        let d = handle(h, "history")?.inner.delta();
        put(out, d, "out")
    })
}

/// Serializes the history to JSON.
///
/// # Safety
/// `h` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_history_snapshot(h: *const ShgHistory, out_json: *mut *mut c_char) -> ShgStatus {
    guard(|| {
        let snap = handle(h, "history")?.inner.snapshot();
        put_string(out_json, json(&snap)?)
    })
}

/// Rebuilds a history from [`shg_history_snapshot`] output.
///
/// # Safety
/// `json_text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn shg_history_restore(json_text: *const c_char, out: *mut *mut ShgHistory) -> ShgStatus {
    guard(|| {
        let snap = serde_json::from_str(str_arg(json_text, "json")?)
            .map_err(|e| Fail(ShgStatus::Config, e.to_string()))?;
        let h = GradientHistory::from_snapshot(&snap)?;
        put(out, Box::into_raw(Box::new(ShgHistory { inner: h })), "out")
    })
}
