use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lenstrack::harness::{
    monte_carlo_sweep, run_first_training, run_training_tracking, training_time_report, trial_seed, write_trace, ExperimentConfig,
    HierarchyParams,
};
use lenstrack::util::deg;
use lenstrack::Result;

#[derive(Parser)]
#[command(name = "lenstrack", version, about = "Lens-MIMO channel training, tracking and pose recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train once on the first block of a trial and print the detected paths.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Run training and tracking for one trial and print the per-block errors.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Monte Carlo sweep over SNR points.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated SNR list in dB, replacing the configured sweep.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snr: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Closed-form training and tracking durations.
    Timing {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        m_g: usize,
        #[arg(long, default_value_t = 32)]
        n_g: usize,
        #[arg(long, default_value_t = 1)]
        n_rf: usize,
        #[arg(long, default_value_t = 2)]
        k_hat: usize,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_toml_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.rng_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>, name: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), &text)?;
    }
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, snr, trial } => {
            let cfg = load(&common)?;
            let (truth, outcome) = run_first_training(&cfg, snr, trial_seed(cfg.rng_seed, trial))?;
            #[derive(Serialize)]
            struct Report<'a> {
                snr_db: f64,
                truth: &'a lenstrack::harness::TruthBlock,
                training: &'a lenstrack::estimation::TrainingResult,
                residual_error: f64,
            }
            let report = Report { snr_db: snr, truth: &truth, training: &outcome.result, residual_error: outcome.residual_error() };
            emit(&report, common.out.as_deref(), "training.json")
        }
        Command::Track { common, snr, trial } => {
            let cfg = load(&common)?;
            let rec = run_training_tracking(&cfg, snr, trial, trial_seed(cfg.rng_seed, trial))?;
            if let Some(reason) = &rec.failure {
                eprintln!("trial failed: {reason}");
            }
            println!("{:>5} {:>10} {:>10} {:>10} {:>10}", "block", "p_err_m", "alpha_deg", "sigma_p", "sigma_a");
            for b in &rec.trace {
                println!("{:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", b.block, b.p_err, deg(b.alpha_err), b.sigma_p, deg(b.sigma_alpha));
            }
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir)?;
                write_trace(&rec.trace, &dir.join(format!("trace_snr{snr}_trial{trial:04}.csv")))?;
            }
            Ok(())
        }
        Command::Sweep { common, snr, trials } => {
            let mut cfg = load(&common)?;
            if let Some(list) = snr {
                cfg.snr_sweep = list;
            }
            if let Some(n) = trials {
                cfg.n_trials = n;
            }
            let res = monte_carlo_sweep(&cfg, common.out.as_deref())?;
            println!("{:>7} {:>12} {:>14} {:>8} {:>7} {:>7}", "snr_db", "rmse_max_p", "rmse_max_a_deg", "p_det", "valid", "failed");
            for m in &res.metrics {
                println!(
                    "{:>7.1} {:>12.4} {:>14.4} {:>8.3} {:>7} {:>7}",
                    m.snr_db,
                    m.rmse_max_p,
                    deg(m.rmse_max_alpha),
                    m.detection_probability,
                    m.n_valid,
                    m.n_failed
                );
            }
            Ok(())
        }
        Command::Timing { common, m_g, n_g, n_rf, k_hat } => {
            let cfg = load(&common)?;
            let h = HierarchyParams { m_g, n_g, n_rf, k_hat };
            let report = training_time_report(cfg.carrier.n_bs, cfg.carrier.n_ms, cfg.training.g_beams, cfg.ofdm.sample_period(), &h);
            emit(&report, common.out.as_deref(), "timing.json")
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
