use std::path::PathBuf;
use std::process::Command;

fn header_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn header_declares_the_exported_symbols() {
    let text = std::fs::read_to_string(header_dir().join("lenstrack.h")).unwrap();
    for sym in [
        "lt_last_error_message",
        "lt_version",
        "lt_config_new_default",
        "lt_config_from_toml",
        "lt_config_free",
        "lt_config_set_trials",
        "lt_config_set_seed",
        "lt_config_set_observation_time",
        "lt_config_set_refine",
        "lt_config_set_snr_sweep",
        "lt_run_sweep",
        "lt_sweep_point_count",
        "lt_sweep_metrics",
        "lt_sweep_write_csv",
        "lt_sweep_free",
        "lt_chi_kernel",
        "lt_cfar_threshold",
        "lt_params_to_pose",
        "lt_training_time",
        "typedef struct LtConfig LtConfig",
        "typedef struct LtSweep LtSweep",
        "LT_STATUS_OK = 0",
    ] {
        assert!(text.contains(sym), "missing {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"lenstrack.h\"\nint main(void) { LtConfig *c = 0; LtMetrics m; (void)m; return lt_config_new_default(&c) == LT_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(header_dir())
        .arg(&src)
        .status()
        .expect("C compiler available");
    assert!(status.success());
}
