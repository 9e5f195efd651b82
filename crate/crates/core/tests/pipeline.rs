use lenstrack::harness::{monte_carlo, monte_carlo_sweep, run_training_tracking, trial_seed, ExperimentConfig};

fn small() -> ExperimentConfig {
    ExperimentConfig { n_trials: 2, snr_sweep: vec![10.0], ..ExperimentConfig::default() }
}

#[test]
fn trial_covers_every_block() {
    let cfg = small();
    let rec = run_training_tracking(&cfg, 10.0, 0, trial_seed(cfg.rng_seed, 0)).unwrap();
    assert!(rec.failure.is_none(), "{:?}", rec.failure);
    assert_eq!(cfg.n_blocks(), 60);
    assert_eq!(rec.p_err.len(), cfg.n_blocks());
    assert_eq!(rec.alpha_err.len(), cfg.n_blocks());
    assert_eq!(rec.trace.len(), cfg.n_blocks());
    assert!(rec.p_err.iter().chain(&rec.alpha_err).all(|e| e.is_finite() && *e >= 0.0));
}

#[test]
fn seed_changes_draws_but_not_echo() {
    let a = small();
    let b = ExperimentConfig { rng_seed: a.rng_seed + 1, ..a.clone() };
    let ra = monte_carlo(&a).unwrap();
    let rb = monte_carlo(&b).unwrap();
    assert_ne!(ra.trials[0][0].p_err, rb.trials[0][0].p_err);
    let mut echo = rb.config.clone();
    echo.rng_seed = a.rng_seed;
    assert_eq!(echo, ra.config);
}

#[test]
fn sweep_is_reproducible() {
    let cfg = small();
    assert_eq!(monte_carlo(&cfg).unwrap(), monte_carlo(&cfg).unwrap());
}

#[test]
fn sweep_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { write_traces: true, ..small() };
    let res = monte_carlo_sweep(&cfg, Some(dir.path())).unwrap();
    for name in ["results.csv", "summary.csv", "config_echo.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let rows = std::fs::read_to_string(dir.path().join("results.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + cfg.n_blocks());
    assert_eq!(std::fs::read_dir(dir.path().join("traces")).unwrap().count(), 2);
    let echo: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config_echo.json")).unwrap()).unwrap();
    assert_eq!(echo, res.config);
}

#[test]
fn refinement_does_not_hurt_training_error() {
    let base = ExperimentConfig { n_trials: 8, snr_sweep: vec![5.0], ..ExperimentConfig::default() };
    let coarse = monte_carlo(&ExperimentConfig { refine: false, ..base.clone() }).unwrap();
    let fine = monte_carlo(&ExperimentConfig { refine: true, ..base }).unwrap();
    let first = |r: &lenstrack::harness::SweepResult| r.metrics[0].blocks[0].rmse_alpha;
    assert!(first(&fine) <= first(&coarse) + 1e-12, "{} > {}", first(&fine), first(&coarse));
}
