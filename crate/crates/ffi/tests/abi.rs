use std::ffi::{CStr, CString};
use std::ptr;

use lenstrack_ffi::*;

fn last_error() -> String {
    let p = lt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config() -> *mut LtConfig {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(lt_config_new_default(&mut cfg), LtStatus::Ok);
        assert_eq!(lt_config_set_trials(cfg, 2), LtStatus::Ok);
        assert_eq!(lt_config_set_observation_time(cfg, 0.05), LtStatus::Ok);
        let snr = [0.0, 10.0];
        assert_eq!(lt_config_set_snr_sweep(cfg, snr.as_ptr(), snr.len()), LtStatus::Ok);
    }
    cfg
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(lt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn sweep_round_trip() {
    let cfg = small_config();
    let mut sweep = ptr::null_mut();
    unsafe {
        assert_eq!(lt_run_sweep(cfg, &mut sweep), LtStatus::Ok);
        assert_eq!(lt_sweep_point_count(sweep), 2);
        let mut m = LtMetrics::default();
        assert_eq!(lt_sweep_metrics(sweep, 1, &mut m), LtStatus::Ok);
        assert_eq!(m.snr_db, 10.0);
        assert_eq!(m.n_valid + m.n_failed, 2);
        assert!(m.rmse_max_alpha >= m.final_rmse_alpha);
        assert_eq!(lt_sweep_metrics(sweep, 2, &mut m), LtStatus::OutOfRange);
        assert!(last_error().contains("out of range"));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(lt_sweep_write_csv(sweep, path.as_ptr()), LtStatus::Ok);
        assert!(dir.path().join("results.csv").exists());
        assert!(dir.path().join("config_echo.json").exists());
        lt_sweep_free(sweep);
        lt_config_free(cfg);
    }
}

#[test]
fn sweeps_are_deterministic_per_seed() {
    let run = |seed: u64| unsafe {
        let cfg = small_config();
        assert_eq!(lt_config_set_seed(cfg, seed), LtStatus::Ok);
        let mut sweep = ptr::null_mut();
        assert_eq!(lt_run_sweep(cfg, &mut sweep), LtStatus::Ok);
        let mut m = LtMetrics::default();
        assert_eq!(lt_sweep_metrics(sweep, 0, &mut m), LtStatus::Ok);
        lt_sweep_free(sweep);
        lt_config_free(cfg);
        m
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn null_and_invalid_arguments_are_reported() {
    unsafe {
        assert_eq!(lt_config_new_default(ptr::null_mut()), LtStatus::NullPointer);
        assert_eq!(lt_config_set_trials(ptr::null_mut(), 3), LtStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut out = ptr::null_mut();
        assert_eq!(lt_run_sweep(ptr::null(), &mut out), LtStatus::NullPointer);
        assert!(out.is_null());

        let cfg = small_config();
        assert_eq!(lt_config_set_trials(cfg, 0), LtStatus::InvalidInput);
        assert_eq!(lt_config_set_observation_time(cfg, 0.001), LtStatus::InvalidInput);
        assert_eq!(lt_config_set_snr_sweep(cfg, ptr::null(), 0), LtStatus::InvalidInput);
        let bad = [f64::NAN];
        assert_eq!(lt_config_set_snr_sweep(cfg, bad.as_ptr(), 1), LtStatus::InvalidInput);
        assert_eq!(lt_config_set_refine(cfg, true), LtStatus::Ok);
        assert!(lt_last_error_message().is_null());
        lt_config_free(cfg);
        lt_config_free(ptr::null_mut());
        lt_sweep_free(ptr::null_mut());
        assert_eq!(lt_sweep_point_count(ptr::null()), 0);
    }
}

#[test]
fn toml_configuration() {
    let good = CString::new("n_trials = 3\nt_ob = 0.1\nsnr_sweep = [5.0]\n").unwrap();
    let bad = CString::new("n_trials = \"many\"").unwrap();
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(lt_config_from_toml(good.as_ptr(), &mut cfg), LtStatus::Ok);
        assert!(!cfg.is_null());
        lt_config_free(cfg);
        let mut other = ptr::null_mut();
        assert_eq!(lt_config_from_toml(bad.as_ptr(), &mut other), LtStatus::Config);
        assert!(other.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(lt_config_from_toml(ptr::null(), &mut other), LtStatus::NullPointer);
    }
}

#[test]
fn scalar_functions_match_the_library() {
    unsafe {
        let mut chi = 0.0;
        assert_eq!(lt_chi_kernel(32, 0.37, &mut chi), LtStatus::Ok);
        assert_eq!(chi, lenstrack::channel::chi_kernel(32, 0.37));
        assert_eq!(lt_chi_kernel(0, 0.1, &mut chi), LtStatus::InvalidInput);

        let mut delta = 0.0;
        assert_eq!(lt_cfar_threshold(40, 32, 1e-3, 2.0, &mut delta), LtStatus::Ok);
        assert_eq!(delta, lenstrack::estimation::cfar_threshold(40, 32, 1e-3, 2.0).unwrap());
        assert_eq!(lt_cfar_threshold(40, 32, 1.5, 2.0, &mut delta), LtStatus::InvalidInput);

        let mut pose = LtPose::default();
        assert_eq!(lt_params_to_pose(0.0, 0.0, 10e-9, 0.3, -0.2, &mut pose), LtStatus::Ok);
        let (p, alpha) = lenstrack::localization::params_to_pose(&lenstrack::nalgebra::Vector2::new(0.0, 0.0), 10e-9, 0.3, -0.2);
        assert_eq!((pose.x, pose.y, pose.alpha), (p.x, p.y, alpha));
        assert_eq!(lt_params_to_pose(0.0, 0.0, -1e-9, 0.3, -0.2, &mut pose), LtStatus::InvalidInput);
        assert_eq!(lt_params_to_pose(0.0, 0.0, 1e-9, 0.3, -0.2, ptr::null_mut()), LtStatus::NullPointer);

        let mut t = LtTiming::default();
        assert_eq!(lt_training_time(32, 32, 16, 5e-9, &mut t), LtStatus::Ok);
        assert_eq!(t.proposed, 2.0 * 16.0 * 5e-9);
        assert_eq!(t.exhaustive, 1024.0 * 5e-9);
        assert_eq!(t.tracking, 10e-9);
        assert_eq!(lt_training_time(32, 32, 16, 0.0, &mut t), LtStatus::InvalidInput);
    }
}

#[test]
fn errors_are_thread_local() {
    unsafe {
        assert_eq!(lt_chi_kernel(0, 0.1, &mut 0.0), LtStatus::InvalidInput);
    }
    let other = std::thread::spawn(|| lt_last_error_message().is_null()).join().unwrap();
    assert!(other);
    assert!(!lt_last_error_message().is_null());
}
