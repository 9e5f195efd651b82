//! C ABI over the `lenstrack` toolkit.
//!
//! Objects are opaque handles created and released through paired `*_new`/`*_free`
//! calls. Every fallible function returns an [`LtStatus`]; on failure a message is
//! available from [`lt_last_error_message`] on the calling thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lenstrack::harness::{monte_carlo, training_time_report, write_outputs, ExperimentConfig, HierarchyParams, SweepResult};
use lenstrack::nalgebra::Vector2;
use lenstrack::{channel, estimation, localization, Error};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Numerical = 3,
    MissingLos = 4,
    Config = 5,
    Io = 6,
    OutOfRange = 7,
    Panic = 8,
}

/// Opaque experiment configuration.
pub struct LtConfig {
    inner: ExperimentConfig,
}

/// Opaque Monte Carlo sweep result.
pub struct LtSweep {
    inner: SweepResult,
}

/// Aggregate metrics of one SNR point. Angles in radians, distances in meters.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LtMetrics {
    pub snr_db: f64,
    pub rmse_max_p: f64,
    pub rmse_max_alpha: f64,
    pub final_rmse_p: f64,
    pub final_rmse_alpha: f64,
    pub residual_error: f64,
    pub detection_probability: f64,
    pub n_valid: usize,
    pub n_failed: usize,
}

/// Position and rotation of the MS.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LtPose {
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
}

/// Closed-form training and tracking durations in seconds.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LtTiming {
    pub proposed: f64,
    pub exhaustive: f64,
    pub hierarchical: f64,
    pub tracking: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LtStatus {
    match e {
        Error::InvalidInput(_) | Error::DimensionMismatch(_) | Error::DegenerateGeometry(_) => LtStatus::InvalidInput,
        Error::Singular(_) => LtStatus::Numerical,
        Error::MissingLos(_) => LtStatus::MissingLos,
        Error::Config(_) => LtStatus::Config,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => LtStatus::Io,
    }
}

fn fail(status: LtStatus, msg: impl Into<String>) -> LtStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), (LtStatus, String)>) -> LtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LtStatus::Ok,
        Ok(Err((s, m))) => fail(s, m),
        Err(_) => fail(LtStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: lenstrack::Result<T>) -> Result<T, (LtStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (LtStatus, String) {
    (LtStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (LtStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (LtStatus::InvalidInput, format!("{what} is not UTF-8")))
}

unsafe fn config_mut<'a>(cfg: *mut LtConfig) -> Result<&'a mut LtConfig, (LtStatus, String)> {
    cfg.as_mut().ok_or_else(|| null("config"))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn lt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration with default values.
///
/// # Safety
/// `out` must be a valid pointer; the handle must be released with [`lt_config_free`].
#[no_mangle]
pub unsafe extern "C" fn lt_config_new_default(out: *mut *mut LtConfig) -> LtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = Box::into_raw(Box::new(LtConfig { inner: ExperimentConfig::default() }));
        Ok(())
    })
}

/// Parses a TOML configuration; missing keys take default values.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lt_config_from_toml(text: *const c_char, out: *mut *mut LtConfig) -> LtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inner = lift(ExperimentConfig::from_toml_str(c_str(text, "text")?))?;
        *out = Box::into_raw(Box::new(LtConfig { inner }));
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lt_config_free(cfg: *mut LtConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets the number of Monte Carlo trials per SNR point.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_config_set_trials(cfg: *mut LtConfig, n_trials: usize) -> LtStatus {
    guard(|| {
        let c = config_mut(cfg)?;
        if n_trials == 0 {
            return Err((LtStatus::InvalidInput, "n_trials must be at least 1".into()));
        }
        c.inner.n_trials = n_trials;
        Ok(())
    })
}

/// Sets the master seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_config_set_seed(cfg: *mut LtConfig, seed: u64) -> LtStatus {
    guard(|| {
        config_mut(cfg)?.inner.rng_seed = seed;
        Ok(())
    })
}

/// Sets the observation time in seconds.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_config_set_observation_time(cfg: *mut LtConfig, t_ob: f64) -> LtStatus {
    guard(|| {
        let c = config_mut(cfg)?;
        let mut next = c.inner.clone();
        next.t_ob = t_ob;
        lift(next.validate())?;
        c.inner = next;
        Ok(())
    })
}

/// Enables or disables angular refinement of the training estimates.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_config_set_refine(cfg: *mut LtConfig, refine: bool) -> LtStatus {
    guard(|| {
        config_mut(cfg)?.inner.refine = refine;
        Ok(())
    })
}

/// Replaces the SNR sweep with `len` values in dB.
///
/// # Safety
/// `cfg` must be a live handle; `snr_db` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn lt_config_set_snr_sweep(cfg: *mut LtConfig, snr_db: *const f64, len: usize) -> LtStatus {
    guard(|| {
        let c = config_mut(cfg)?;
        if snr_db.is_null() || len == 0 {
            return Err((LtStatus::InvalidInput, "SNR list must be non-empty".into()));
        }
        let list = std::slice::from_raw_parts(snr_db, len);
        if list.iter().any(|v| !v.is_finite()) {
            return Err((LtStatus::InvalidInput, "SNR values must be finite".into()));
        }
        c.inner.snr_sweep = list.to_vec();
        Ok(())
    })
}

/// Runs the Monte Carlo sweep described by `cfg`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid. Release the result with [`lt_sweep_free`].
#[no_mangle]
pub unsafe extern "C" fn lt_run_sweep(cfg: *const LtConfig, out: *mut *mut LtSweep) -> LtStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("config"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inner = lift(monte_carlo(&c.inner))?;
        *out = Box::into_raw(Box::new(LtSweep { inner }));
        Ok(())
    })
}

/// Number of SNR points in a sweep result; 0 for null.
///
/// # Safety
/// `sweep` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lt_sweep_point_count(sweep: *const LtSweep) -> usize {
    sweep.as_ref().map_or(0, |s| s.inner.metrics.len())
}

/// Metrics of SNR point `index`.
///
/// # Safety
/// `sweep` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lt_sweep_metrics(sweep: *const LtSweep, index: usize, out: *mut LtMetrics) -> LtStatus {
    guard(|| {
        let s = sweep.as_ref().ok_or_else(|| null("sweep"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = s.inner.metrics.get(index).ok_or_else(|| (LtStatus::OutOfRange, format!("point {index} out of range")))?;
        let last = m.final_block();
        *out = LtMetrics {
            snr_db: m.snr_db,
            rmse_max_p: m.rmse_max_p,
            rmse_max_alpha: m.rmse_max_alpha,
            final_rmse_p: last.map_or(f64::NAN, |b| b.rmse_p),
            final_rmse_alpha: last.map_or(f64::NAN, |b| b.rmse_alpha),
            residual_error: m.residual_error,
            detection_probability: m.detection_probability,
            n_valid: m.n_valid,
            n_failed: m.n_failed,
        };
        Ok(())
    })
}

/// Writes `results.csv`, `summary.csv` and `config_echo.json` into directory `dir`.
///
/// # Safety
/// `sweep` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lt_sweep_write_csv(sweep: *const LtSweep, dir: *const c_char) -> LtStatus {
    guard(|| {
        let s = sweep.as_ref().ok_or_else(|| null("sweep"))?;
        let dir = c_str(dir, "dir")?;
        lift(write_outputs(&s.inner, Path::new(dir)))?;
        Ok(())
    })
}

/// Releases a sweep result. Null is ignored.
///
/// # Safety
/// `sweep` must come from [`lt_run_sweep`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lt_sweep_free(sweep: *mut LtSweep) {
    if !sweep.is_null() {
        drop(Box::from_raw(sweep));
    }
}

/// Beamspace kernel `χ_N(x)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lt_chi_kernel(n: usize, x: f64, out: *mut f64) -> LtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if n == 0 || !x.is_finite() {
            return Err((LtStatus::InvalidInput, "need n > 0 and finite x".into()));
        }
        *out = channel::chi_kernel(n, x);
        Ok(())
    })
}

/// CFAR stopping threshold for `n_subcarriers` observations over `n_antennas` atoms.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lt_cfar_threshold(n_subcarriers: usize, n_antennas: usize, p_fa: f64, noise_psd: f64, out: *mut f64) -> LtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lift(estimation::cfar_threshold(n_subcarriers, n_antennas, p_fa, noise_psd))?;
        Ok(())
    })
}

/// MS pose from LOS delay and angles for a BS at `(qx, qy)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lt_params_to_pose(qx: f64, qy: f64, tau: f64, theta: f64, phi: f64, out: *mut LtPose) -> LtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if ![qx, qy, tau, theta, phi].iter().all(|v| v.is_finite()) || tau < 0.0 {
            return Err((LtStatus::InvalidInput, "inputs must be finite with non-negative delay".into()));
        }
        let (p, alpha) = localization::params_to_pose(&Vector2::new(qx, qy), tau, theta, phi);
        *out = LtPose { x: p.x, y: p.y, alpha };
        Ok(())
    })
}

/// Training and tracking durations for the given array sizes, training length and sample period.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lt_training_time(n_bs: usize, n_ms: usize, g: usize, sample_period: f64, out: *mut LtTiming) -> LtStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if sample_period.is_nan() || sample_period <= 0.0 {
            return Err((LtStatus::InvalidInput, "sample period must be positive".into()));
        }
        let r = training_time_report(n_bs, n_ms, g, sample_period, &HierarchyParams::default());
        *out = LtTiming { proposed: r.proposed, exhaustive: r.exhaustive, hierarchical: r.hierarchical, tracking: r.tracking };
        Ok(())
    })
}
