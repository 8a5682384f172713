//! C ABI over `dva-core`: checkpoint loading and prediction, diffusion
//! schedules, and the portfolio solvers.
//!
//! Every fallible call returns a [`DvaStatus`]; on failure the message is
//! available from [`dva_last_error_message`] on the same thread. Matrices are
//! dense row-major `double` arrays. Handles are opaque and must be released
//! with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use chrono::NaiveDate;
use dva_core::data::{WindowPair, N_FEATURES};
use dva_core::diffusion::{DiffusionSchedule, TargetAlpha};
use dva_core::portfolio;
use dva_core::training::{predict, Checkpoint};
use dva_core::DvaError;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Contract = 5,
    NonFinite = 6,
    NonConvergence = 7,
    DegenerateReturns = 8,
    MissingArtifact = 9,
    HashMismatch = 10,
    Io = 11,
    Parse = 12,
    Panic = 13,
}

impl From<&DvaError> for DvaStatus {
    fn from(e: &DvaError) -> Self {
        match e {
            DvaError::Contract(_) => DvaStatus::Contract,
            DvaError::Config(_) => DvaStatus::Config,
            DvaError::Data(_) => DvaStatus::Data,
            DvaError::Parse { .. } | DvaError::Json(_) | DvaError::Csv(_) => DvaStatus::Parse,
            DvaError::NonFinite { .. } => DvaStatus::NonFinite,
            DvaError::NonConvergence { .. } => DvaStatus::NonConvergence,
            DvaError::DegenerateReturns => DvaStatus::DegenerateReturns,
            DvaError::MissingArtifact(_) => DvaStatus::MissingArtifact,
            DvaError::HashMismatch { .. } => DvaStatus::HashMismatch,
            DvaError::WouldOverwrite(_) | DvaError::Io { .. } => DvaStatus::Io,
        }
    }
}

/// A loaded checkpoint.
pub struct DvaModel {
    checkpoint: Checkpoint,
}

/// A diffusion variance schedule.
pub struct DvaSchedule {
    inner: DiffusionSchedule,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DvaStatus, msg: impl Into<String>) -> DvaStatus {
    set_error(msg.into());
    status
}

/// Run `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (DvaStatus, String)>) -> DvaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DvaStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(DvaStatus::Panic, "internal panic"),
    }
}

fn core_err(e: DvaError) -> (DvaStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(what: &str) -> (DvaStatus, String) {
    (DvaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (DvaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (DvaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (DvaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DvaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dva_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dva_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a JSON checkpoint. `expected_hash` may be null to skip the
/// configuration-hash check.
///
/// # Safety
/// `path` and a non-null `expected_hash` must be NUL-terminated strings;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dva_model_load(
    path: *const c_char,
    expected_hash: *const c_char,
    out: *mut *mut DvaModel,
) -> DvaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let expected = if expected_hash.is_null() {
            None
        } else {
            Some(c_str(expected_hash, "expected_hash")?)
        };
        let p = Path::new(path);
        if !p.exists() {
            return Err(core_err(DvaError::MissingArtifact(p.to_path_buf())));
        }
        let text = std::fs::read_to_string(p).map_err(|e| core_err(DvaError::io(p, e)))?;
        let checkpoint = Checkpoint::from_json(&text, expected).map_err(core_err)?;
        *out = Box::into_raw(Box::new(DvaModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dva_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dva_model_free(model: *mut DvaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input window length `T`; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dva_model_input_len(model: *const DvaModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.config.t_in)
}

/// Prediction horizon `T'`; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dva_model_output_len(model: *const DvaModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.config.t_out)
}

/// Predict `T'` gross returns from one window of `T` feature rows, each row
/// `open, high, low, volume, delta, r` as produced by featurization.
/// `x_len` must be `6 * T` and `out_len` must be `T'`.
///
/// # Safety
/// `x` must point to `x_len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dva_model_predict(
    model: *const DvaModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> DvaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = &m.checkpoint.config;
        if x_len != N_FEATURES * cfg.t_in || out_len != cfg.t_out {
            return Err((
                DvaStatus::InvalidArgument,
                format!(
                    "expected {} inputs and {} outputs, got {x_len} and {out_len}",
                    N_FEATURES * cfg.t_in,
                    cfg.t_out
                ),
            ));
        }
        let x = input(x, x_len, "x")?;
        let out = output(out, out_len, "out")?;
        let window = WindowPair {
            anchor: NaiveDate::MIN,
            anchor_index: 0,
            x: x.chunks(N_FEATURES)
                .map(|row| row.try_into().expect("chunk of six"))
                .collect(),
            y: vec![0.0; cfg.t_out],
        };
        let pred = predict(&m.checkpoint, &[window]).map_err(core_err)?;
        out.copy_from_slice(&pred[0]);
        Ok(())
    })
}

/// Linear schedule of `n_steps` betas with the target schedule scaled by
/// `gamma_scale`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dva_schedule_new(
    n_steps: usize,
    beta_min: f64,
    beta_max: f64,
    gamma_scale: f64,
    out: *mut *mut DvaSchedule,
) -> DvaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = DiffusionSchedule::new(n_steps, beta_min, beta_max, gamma_scale).map_err(core_err)?;
        *out = Box::into_raw(Box::new(DvaSchedule { inner }));
        Ok(())
    })
}

/// # Safety
/// `schedule` must come from [`dva_schedule_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dva_schedule_free(schedule: *mut DvaSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Cumulative alpha at step `n` (`0..=N`); `target != 0` selects the target
/// schedule.
///
/// # Safety
/// `schedule` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dva_schedule_alpha_bar(
    schedule: *const DvaSchedule,
    n: usize,
    target: c_int,
    out: *mut f64,
) -> DvaStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if n > s.inner.steps() {
            return Err((
                DvaStatus::InvalidArgument,
                format!("step {n} outside 0..={}", s.inner.steps()),
            ));
        }
        let source = if target != 0 {
            TargetAlpha::Prime
        } else {
            TargetAlpha::Unprime
        };
        *out = s.inner.target_alpha_bar(n, source);
        Ok(())
    })
}

/// Long-only, fully invested weights maximizing `w'mu - gamma/2 w'Sigma w`.
///
/// # Safety
/// `mu` and `out_w` must hold `n` doubles, `sigma` `n * n`.
#[no_mangle]
pub unsafe extern "C" fn dva_mean_variance_weights(
    mu: *const f64,
    sigma: *const f64,
    n: usize,
    gamma: f64,
    out_w: *mut f64,
) -> DvaStatus {
    guard(|| {
        if n == 0 {
            return Err((DvaStatus::InvalidArgument, "n must be positive".into()));
        }
        let mu = DVector::from_column_slice(input(mu, n, "mu")?);
        let sigma = DMatrix::from_row_slice(n, n, input(sigma, n * n, "sigma")?);
        let out = output(out_w, n, "out_w")?;
        let w = portfolio::mean_variance_weights(&mu, &sigma, gamma).map_err(core_err)?;
        out.copy_from_slice(&w);
        Ok(())
    })
}

/// Sparse precision matrix with off-diagonal L1 penalty `lambda`.
///
/// # Safety
/// `sigma` and `out_theta` must hold `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn dva_graphical_lasso(
    sigma: *const f64,
    n: usize,
    lambda: f64,
    out_theta: *mut f64,
) -> DvaStatus {
    guard(|| {
        if n == 0 {
            return Err((DvaStatus::InvalidArgument, "n must be positive".into()));
        }
        let sigma = DMatrix::from_row_slice(n, n, input(sigma, n * n, "sigma")?);
        let out = output(out_theta, n * n, "out_theta")?;
        let p = portfolio::graphical_lasso(&sigma, lambda).map_err(core_err)?;
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = p.theta[(i, j)];
            }
        }
        Ok(())
    })
}

/// Mean over sample standard deviation of `n` returns.
///
/// # Safety
/// `returns` must hold `n` doubles and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dva_sharpe(returns: *const f64, n: usize, out: *mut f64) -> DvaStatus {
    guard(|| {
        let r = input(returns, n, "returns")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = portfolio::sharpe(r).map_err(core_err)?;
        Ok(())
    })
}
