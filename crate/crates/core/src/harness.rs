//! End-to-end training and tracking runs, Monte Carlo sweeps and result tables.
//!
//! One trial draws a constant-rate trajectory with white-acceleration
//! perturbations, trains twice (blocks 0 and 1) to initialize the filters and then tracks the
//! LOS delay and angles block by block with re-centered heuristic beam banks.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamforming::{heuristic_beamformer, min_beam_count};
use crate::channel::{dominant_beam, sparse_beamspace_vector, ArrayConfig, ArrayPair, Link, OfdmConfig, Side};
use crate::error::{invalid, Error, Result};
use crate::estimation::{
    angular_refine, cfar_threshold, cs_baseline_estimate, estimate_delay_gain, sd_estimate, sd_estimate_uplink, DelayGrid,
    PathEstimate, SparseEstimate, TrainingFlags, TrainingResult,
};
use crate::localization::estimate_pose;
use crate::scene::{generate_paths, CarrierConfig, PathParams, Scene};
use crate::signaling::{
    default_pilot, make_sensing_matrix, noise_psd_for_snr, synthesize_tracking_rx, synthesize_training_rx, LinkBeams,
    SensingMatrix, TrainingConfig,
};
use crate::tracking::{
    discretize_process_noise_for, ekf_predict, ekf_update_iterated, ekf_update_searched, init_state_from, make_transition_for, DownlinkModel,
    InitialUncertainty, LosEstimate, MeasurementNoise, MotionModel, ProcessNoiseConfig, SearchGrid, TrackState, UplinkModel,
};
use crate::util::{angle_diff, derive_seed, seeded_rng, total_energy, SimRng};
use crate::SPEED_OF_LIGHT;

const DEG: f64 = std::f64::consts::PI / 180.0;

/// Initial geometry draws and nominal rates of the MS trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Initial BS-MS distance range in meters.
    pub distance: [f64; 2],
    /// Initial BS-side angle range in radians.
    pub theta0: [f64; 2],
    /// Initial MS-side angle range in radians.
    pub phi0: [f64; 2],
    /// Nominal BS-side angular rate in rad/s.
    pub theta_rate: f64,
    /// Nominal MS-side angular rate in rad/s.
    pub phi_rate: f64,
    /// Nominal radial speed in m/s.
    pub radial_speed: f64,
    pub n_scatterers: usize,
    /// Scatterer box `[x_min, x_max]` in meters.
    pub scatterer_x: [f64; 2],
    /// Scatterer box `[y_min, y_max]` in meters.
    pub scatterer_y: [f64; 2],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            distance: [4.0, 6.0],
            theta0: [-35.0 * DEG, -25.0 * DEG],
            phi0: [-20.0 * DEG, -10.0 * DEG],
            theta_rate: 0.4529 * DEG / 0.01,
            phi_rate: 0.2265 * DEG / 0.01,
            radial_speed: 0.0,
            n_scatterers: 2,
            scatterer_x: [2.0, 10.0],
            scatterer_y: [-8.0, 8.0],
        }
    }
}

/// Full experiment description; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub carrier: CarrierConfig,
    pub ofdm: OfdmConfig,
    pub training: TrainingConfig,
    /// Process noise assumed by the filters.
    pub process_noise: ProcessNoiseConfig,
    /// Process noise of the simulated truth; `None` uses `process_noise`.
    pub truth_process_noise: Option<ProcessNoiseConfig>,
    pub initial_uncertainty: InitialUncertainty,
    pub trajectory: TrajectoryConfig,
    pub motion_model: MotionModel,
    /// Maximum angular spreads in radians that the receive banks must cover.
    pub sigma_max_theta: f64,
    pub sigma_max_phi: f64,
    /// Observation time and block duration in seconds.
    pub t_ob: f64,
    pub t_b: f64,
    pub snr_sweep: Vec<f64>,
    pub n_trials: usize,
    pub rng_seed: u64,
    /// Angular refinement in training.
    pub refine: bool,
    pub refine_points: usize,
    /// Gauss-Newton iterations of each filter update.
    pub ekf_iterations: usize,
    /// Multiplier on the thermal measurement covariance to absorb unmodeled NLOS energy.
    pub measurement_inflation: f64,
    /// Transmit banks cover `±tx_sigma_factor·σ` of the current estimate.
    pub tx_sigma_factor: f64,
    pub max_tx_beams: usize,
    /// Tracking pilot power relative to a unit-norm precoder; `None` uses the transmit array size,
    /// which matches the transmit normalization of the training model.
    pub tracking_power: Option<f64>,
    /// Grid search seeding each tracking update; `None` linearizes at the prediction.
    pub search: Option<SearchGrid>,
    /// Association gate, in beam cells, between the LOS detections of the two trainings; see [`associate`].
    pub init_gate_cells: Option<f64>,
    /// Emit one trace file per trial.
    pub write_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            carrier: CarrierConfig::default(),
            ofdm: OfdmConfig::default(),
            training: TrainingConfig::default(),
            process_noise: ProcessNoiseConfig::default(),
            truth_process_noise: None,
            initial_uncertainty: InitialUncertainty::default(),
            trajectory: TrajectoryConfig::default(),
            motion_model: MotionModel::ConstantRate,
            sigma_max_theta: 20.0 * DEG,
            sigma_max_phi: 20.0 * DEG,
            t_ob: 0.6,
            t_b: 0.01,
            snr_sweep: vec![-10.0, -5.0, 0.0, 5.0, 10.0],
            n_trials: 100,
            rng_seed: 1,
            refine: false,
            refine_points: 64,
            ekf_iterations: 3,
            measurement_inflation: 2.0,
            tx_sigma_factor: 3.0,
            max_tx_beams: 7,
            tracking_power: None,
            search: Some(SearchGrid::default()),
            init_gate_cells: Some(2.5),
            write_traces: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.ofdm.validate()?;
        self.training.validate()?;
        if !(self.t_b > 0.0) || !(self.t_ob >= self.t_b) {
            return Err(invalid("need 0 < t_b ≤ t_ob"));
        }
        if self.n_trials == 0 {
            return Err(invalid("n_trials must be at least 1"));
        }
        if self.n_blocks() < 3 {
            return Err(invalid("observation time must span at least three blocks"));
        }
        if (self.carrier.carrier_freq - self.ofdm.carrier_freq).abs() > 1e-6 * self.carrier.carrier_freq {
            return Err(invalid("carrier and OFDM carrier frequencies differ"));
        }
        if self.carrier.n_bs < 2 || self.carrier.n_ms < 2 {
            return Err(invalid("arrays need at least two elements"));
        }
        if !(self.sigma_max_theta > 0.0 && self.sigma_max_phi > 0.0) {
            return Err(invalid("maximum angular spreads must be positive"));
        }
        if self.search.is_some_and(|g| !(g.span_sigmas > 0.0) || g.points < 2) {
            return Err(invalid("search grid needs a positive span and at least two points"));
        }
        if self.init_gate_cells.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("association gate must be positive"));
        }
        if self.tracking_power.is_some_and(|p| !(p > 0.0)) {
            return Err(invalid("tracking power must be positive"));
        }
        if !(self.measurement_inflation >= 1.0) || !(self.tx_sigma_factor > 0.0) || self.max_tx_beams == 0 {
            return Err(invalid("inflation ≥ 1, positive transmit factor and at least one transmit beam required"));
        }
        let t = &self.trajectory;
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if ![t.distance, t.theta0, t.phi0, t.scatterer_x, t.scatterer_y].into_iter().all(ordered) || !(t.distance[0] > 0.0) {
            return Err(invalid("trajectory ranges must be ordered and distances positive"));
        }
        Ok(())
    }

    /// `floor(T_ob / T_B)`.
    pub fn n_blocks(&self) -> usize {
        (self.t_ob / self.t_b + 1e-9).floor() as usize
    }

    pub fn arrays(&self) -> ArrayPair {
        let l = self.carrier.wavelength();
        ArrayPair { bs: ArrayConfig::half_wavelength(self.carrier.n_bs, l), ms: ArrayConfig::half_wavelength(self.carrier.n_ms, l) }
    }

    /// Tracking pilot power for the given link.
    pub fn pilot_power(&self, link: Link) -> f64 {
        let n_tx = match link {
            Link::Uplink => self.carrier.n_ms,
            Link::Downlink => self.carrier.n_bs,
        };
        self.tracking_power.unwrap_or(n_tx as f64)
    }

    pub fn truth_noise(&self) -> ProcessNoiseConfig {
        self.truth_process_noise.unwrap_or(self.process_noise)
    }

    /// Receive bank size: the minimum count for the configured spread plus one.
    pub fn receive_beams(&self, link: Link) -> Result<usize> {
        let (sigma, n) = match link {
            Link::Uplink => (self.sigma_max_theta, self.carrier.n_bs),
            Link::Downlink => (self.sigma_max_phi, self.carrier.n_ms),
        };
        Ok((min_beam_count(sigma, n)? + 1).min(n))
    }
}

/// `T_B ≈ d₀ / (v_max·N_BS)`.
pub fn block_duration_for(d0: f64, v_max: f64, n_bs: usize) -> Result<f64> {
    if !(d0 > 0.0 && v_max > 0.0) || n_bs == 0 {
        return Err(invalid("distance, speed and array size must be positive"));
    }
    Ok(d0 / (v_max * n_bs as f64))
}

/// Ground truth at one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBlock {
    pub tau: f64,
    pub theta: f64,
    pub phi: f64,
    pub p: Vector2<f64>,
    pub alpha: f64,
    pub paths: Vec<PathParams>,
}

/// Sampled trajectory with its fixed scatterers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub q: Vector2<f64>,
    pub scatterers: Vec<Vector2<f64>>,
    pub blocks: Vec<TruthBlock>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Exact white-acceleration increment `(Δx, Δv)` of one parameter over `t`.
fn cwna_increment<R: Rng + ?Sized>(sigma: f64, t: f64, rng: &mut R) -> (f64, f64) {
    let z1 = standard_normal(rng);
    let z2 = standard_normal(rng);
    if sigma <= 0.0 {
        return (0.0, 0.0);
    }
    let dx = sigma * (t.powi(3) / 3.0).sqrt() * z1;
    let dv = sigma * t.sqrt() * (0.75f64.sqrt() * z1 + 0.5 * z2);
    (dx, dv)
}

/// Draws the trajectory and the per-block paths.
pub fn sample_trajectory(cfg: &ExperimentConfig, seed: u64) -> Result<Trajectory> {
    let mut rng = seeded_rng(derive_seed(seed, 1));
    let t = &cfg.trajectory;
    let q = Vector2::zeros();
    let d0 = uniform(&mut rng, t.distance);
    let mut theta = uniform(&mut rng, t.theta0);
    let mut phi = uniform(&mut rng, t.phi0);
    let mut tau = d0 / SPEED_OF_LIGHT;
    let (mut tau_rate, mut theta_rate, mut phi_rate) = (t.radial_speed / SPEED_OF_LIGHT, t.theta_rate, t.phi_rate);
    let scatterers: Vec<Vector2<f64>> =
        (0..t.n_scatterers).map(|_| Vector2::new(uniform(&mut rng, t.scatterer_x), uniform(&mut rng, t.scatterer_y))).collect();
    let noise = cfg.truth_noise();
    let gain_seed = derive_seed(seed, 4);
    let mut blocks = Vec::with_capacity(cfg.n_blocks());
    for m in 0..cfg.n_blocks() {
        if m > 0 {
            let (a, b) = cwna_increment(noise.sigma_tau, cfg.t_b, &mut rng);
            tau += tau_rate * cfg.t_b + a;
            tau_rate += b;
            let (a, b) = cwna_increment(noise.sigma_theta, cfg.t_b, &mut rng);
            theta += theta_rate * cfg.t_b + a;
            theta_rate += b;
            let (a, b) = cwna_increment(noise.sigma_phi, cfg.t_b, &mut rng);
            phi += phi_rate * cfg.t_b + a;
            phi_rate += b;
        }
        if !(tau > 0.0) {
            return Err(Error::DegenerateGeometry("trajectory reached the BS".into()));
        }
        let (p, alpha) = crate::localization::params_to_pose(&q, tau, theta, phi);
        let scene = Scene::new(q, p, alpha, scatterers.clone())?;
        let paths = generate_paths(&scene, &cfg.carrier, gain_seed)?;
        blocks.push(TruthBlock { tau, theta, phi, p, alpha: scene.alpha, paths });
    }
    Ok(Trajectory { q, scatterers, blocks })
}

/// Training output together with the raw sparse estimates.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub result: TrainingResult,
    pub downlink: SparseEstimate,
    pub uplink: SparseEstimate,
    pub sensing_dl: SensingMatrix,
    pub sensing_ul: SensingMatrix,
    /// Downlink detections as `(φ, τ, |gain|)`, in detection order.
    pub dl_candidates: Vec<Candidate>,
    /// Uplink detections as `(θ, τ, |gain|)`, in detection order.
    pub ul_candidates: Vec<Candidate>,
}

/// One detected path reduced to angle, delay and gain magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub angle: f64,
    pub tau: f64,
    pub magnitude: f64,
}

impl TrainingOutcome {
    /// Final over initial downlink residual energy.
    pub fn residual_error(&self) -> f64 {
        normalized_residual(&self.downlink)
    }
}

fn normalized_residual(est: &SparseEstimate) -> f64 {
    let first = est.residual_history.first().copied().unwrap_or(0.0);
    if first > 0.0 {
        est.final_residual_energy() / first
    } else {
        0.0
    }
}

fn stopping_threshold(y: &[crate::util::CVector], sensing: &SensingMatrix, p_fa: f64, noise_psd: f64) -> Result<f64> {
    if noise_psd > 0.0 {
        cfar_threshold(y.len(), sensing.n_antennas(), p_fa, sensing.mean_noise_variance(noise_psd))
    } else {
        Ok((1e-12 * total_energy(y)).max(1e-300))
    }
}

fn subcarrier_subset(s: &SensingMatrix, n: usize) -> SensingMatrix {
    SensingMatrix { selector: s.selector.clone(), symbols: s.symbols[..n].to_vec() }
}

/// Downlink support detection with delay/gain recovery, then uplink angle detection.
#[allow(clippy::too_many_arguments)]
pub fn run_training<R: Rng + ?Sized>(
    paths: &[PathParams],
    arrays: &ArrayPair,
    ofdm: &OfdmConfig,
    cfg: &TrainingConfig,
    noise_psd: f64,
    refine_points: Option<usize>,
    sensing_seed: u64,
    rng: &mut R,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    cfg.check_g(arrays.ms.n_elements);
    let dl_cfg = TrainingConfig { rng_seed: derive_seed(sensing_seed, 0), ..cfg.clone() };
    let ul_cfg = TrainingConfig { rng_seed: derive_seed(sensing_seed, 1), ..cfg.clone() };
    let sensing_dl = make_sensing_matrix(arrays.ms.n_elements, &dl_cfg, ofdm)?;
    let sensing_ul_full = make_sensing_matrix(arrays.bs.n_elements, &ul_cfg, ofdm)?;

    let h_ms = sparse_beamspace_vector(paths, arrays, ofdm, Side::Ms);
    let y_dl = synthesize_training_rx(&h_ms, &sensing_dl, noise_psd, rng)?;
    let delta_dl = stopping_threshold(&y_dl, &sensing_dl, cfg.p_fa, noise_psd)?;
    let downlink = sd_estimate(&y_dl, &sensing_dl, &arrays.ms, cfg.v_elements, delta_dl, cfg.max_iterations)?;

    let h_bs = sparse_beamspace_vector(paths, arrays, ofdm, Side::Bs);
    let y_ul_full = synthesize_training_rx(&h_bs, &sensing_ul_full, noise_psd, rng)?;
    let u = cfg.uplink_subcarriers.unwrap_or(ofdm.n_subcarriers).clamp(1, ofdm.n_subcarriers);
    let sensing_ul = subcarrier_subset(&sensing_ul_full, u);
    let y_ul = &y_ul_full[..u];
    let delta_ul = stopping_threshold(y_ul, &sensing_ul, cfg.p_fa, noise_psd)?;
    let ul = sd_estimate_uplink(y_ul, &sensing_ul, &arrays.bs, cfg.v_elements, delta_ul, cfg.max_iterations, downlink.detections.len())?;

    let grid = DelayGrid::standard(ofdm);
    let mut out = Vec::with_capacity(downlink.detections.len());
    for (k, d) in downlink.detections.iter().enumerate() {
        let dg = estimate_delay_gain(&d.coeffs, ofdm, &grid)?;
        let aoa_dl = match refine_points {
            Some(pts) => angular_refine(d.angle, &d.residual_before, &sensing_dl, &arrays.ms, None, pts).angle,
            None => d.angle,
        };
        let aoa_ul = ul.estimate.detections.get(k).filter(|_| k < ul.angles.len()).map(|du| match refine_points {
            Some(pts) => angular_refine(du.angle, &du.residual_before, &sensing_ul, &arrays.bs, None, pts).angle,
            None => du.angle,
        });
        out.push(PathEstimate {
            aoa_dl,
            aoa_ul,
            toa: dg.toa,
            gain: dg.gain,
            support: d.support.clone(),
            support_ul: ul.supports.get(k).cloned(),
        });
    }
    let dl_candidates = out.iter().map(|p| Candidate { angle: p.aoa_dl, tau: p.toa, magnitude: p.gain.norm() }).collect();
    let ul_candidates = ul
        .estimate
        .detections
        .iter()
        .enumerate()
        .map(|(j, du)| {
            let dg = estimate_delay_gain(&du.coeffs, ofdm, &grid).ok();
            Candidate {
                angle: out.get(j).and_then(|p| p.aoa_ul).unwrap_or(du.angle),
                tau: dg.as_ref().map_or(f64::NAN, |g| g.toa),
                magnitude: dg.as_ref().map_or(0.0, |g| g.gain.norm()),
            }
        })
        .collect();
    let flags = TrainingFlags {
        empty_downlink: downlink.flags.empty,
        empty_uplink: ul.estimate.flags.empty,
        count_mismatch: ul.count_mismatch,
        iteration_cap: downlink.flags.iteration_cap || ul.estimate.flags.iteration_cap,
    };
    Ok(TrainingOutcome {
        result: TrainingResult { paths: out, residual_history: downlink.residual_history.clone(), flags },
        downlink,
        uplink: ul.estimate,
        sensing_dl,
        sensing_ul,
        dl_candidates,
        ul_candidates,
    })
}

/// Picks the pair of detections from two consecutive trainings that agree within
/// `cells` beam widths `2/n` in sine space and `delay_gate` seconds.
///
/// The strongest pair `(0, 0)` is kept when consistent; otherwise the consistent pair
/// containing one leading detection with the largest summed magnitude wins.
/// `None` if no such pair is consistent.
pub fn associate(first: &[Candidate], second: &[Candidate], n: usize, cells: f64, delay_gate: f64) -> Option<(usize, usize)> {
    let gate = cells * 2.0 / n as f64;
    let ok = |a: &Candidate, b: &Candidate| {
        (a.angle.sin() - b.angle.sin()).abs() <= gate && (a.tau.is_nan() || b.tau.is_nan() || (a.tau - b.tau).abs() <= delay_gate)
    };
    if let (Some(a), Some(b)) = (first.first(), second.first()) {
        if ok(a, b) {
            return Some((0, 0));
        }
    }
    let mut best: Option<((usize, usize), f64)> = None;
    for (i, a) in first.iter().enumerate() {
        for (j, b) in second.iter().enumerate() {
            let score = a.magnitude + b.magnitude;
            if (i == 0 || j == 0) && ok(a, b) && best.is_none_or(|(_, s)| score > s) {
                best = Some(((i, j), score));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// [`associate`], falling back to the stronger of the two leading detections for both blocks.
fn associate_or_strongest(first: &[Candidate], second: &[Candidate], n: usize, cells: f64, delay_gate: f64) -> Vec<Candidate> {
    if let Some((i, j)) = associate(first, second, n, cells, delay_gate) {
        return vec![first[i], second[j]];
    }
    match (first.first(), second.first()) {
        (Some(a), Some(b)) => {
            let c = if b.magnitude > a.magnitude { *b } else { *a };
            vec![c, c]
        }
        _ => Vec::new(),
    }
}

/// Tracking beams of one link: transmit bank around the far-end estimate, receive bank around the near-end prediction.
#[allow(clippy::too_many_arguments)]
fn link_beams(
    cfg: &ExperimentConfig,
    arrays: &ArrayPair,
    link: Link,
    tx_center: f64,
    tx_sigma: f64,
    rx_center: f64,
    m_rx: usize,
) -> Result<LinkBeams> {
    let (tx_array, rx_array) = match link {
        Link::Uplink => (arrays.ms, arrays.bs),
        Link::Downlink => (arrays.bs, arrays.ms),
    };
    let spread = (2.0 * cfg.tx_sigma_factor * tx_sigma).max(1e-6);
    let m_tx = min_beam_count(spread, tx_array.n_elements).unwrap_or(tx_array.n_elements).clamp(1, cfg.max_tx_beams);
    let tx = heuristic_beamformer(tx_center, m_tx, &tx_array)?.composed();
    let rx = heuristic_beamformer(rx_center, m_rx, &rx_array)?.composed();
    LinkBeams::from_antenna(link, arrays, &tx, &rx)
}

/// Per-block estimate against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub block: usize,
    pub tau: f64,
    pub theta: f64,
    pub phi: f64,
    pub tau_hat: f64,
    pub theta_hat: f64,
    pub phi_hat: f64,
    pub p_err: f64,
    pub alpha_err: f64,
    pub sigma_p: f64,
    pub sigma_alpha: f64,
    /// Normalized innovation squared per degree of freedom; absent for training blocks.
    pub nis_ul: Option<f64>,
    pub nis_dl: Option<f64>,
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub snr_db: f64,
    pub trial: usize,
    pub seed: u64,
    /// Reason the trial was excluded from the error statistics.
    pub failure: Option<String>,
    /// Position error per block in meters.
    pub p_err: Vec<f64>,
    /// Absolute wrapped rotation error per block in radians.
    pub alpha_err: Vec<f64>,
    /// Final over initial downlink training residual energy.
    pub residual_error: f64,
    /// The LOS dominant beam lies in the detected downlink support.
    pub los_detected: bool,
    pub k_hat: Option<usize>,
    pub trace: Vec<BlockTrace>,
}

fn training_pose(q: &Vector2<f64>, los: &LosEstimate, unc: &InitialUncertainty, truth: &TruthBlock) -> Result<(f64, f64, f64, f64)> {
    let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![unc.sigma_tau.powi(2), unc.sigma_theta.powi(2)]));
    let pose = estimate_pose(q, los.tau.max(1e-12), los.theta, los.phi, &cov, unc.sigma_phi.powi(2))?;
    Ok((
        (pose.p_hat - truth.p).norm(),
        angle_diff(pose.alpha_hat, truth.alpha).abs(),
        pose.p_cov.trace().max(0.0).sqrt(),
        pose.alpha_var.max(0.0).sqrt(),
    ))
}

fn failed(snr_db: f64, trial: usize, seed: u64, reason: String, residual_error: f64, k_hat: Option<usize>) -> TrialRecord {
    TrialRecord {
        snr_db,
        trial,
        seed,
        failure: Some(reason),
        p_err: Vec::new(),
        alpha_err: Vec::new(),
        residual_error,
        los_detected: false,
        k_hat,
        trace: Vec::new(),
    }
}

/// Noise PSD giving `snr_db` on the first-block downlink training of a trial.
fn trial_noise_psd(cfg: &ExperimentConfig, truth: &Trajectory, snr_db: f64, sensing_seed: u64) -> Result<f64> {
    let arrays = cfg.arrays();
    let probe = make_sensing_matrix(arrays.ms.n_elements, &TrainingConfig { rng_seed: derive_seed(sensing_seed, 0), ..cfg.training.clone() }, &cfg.ofdm)?;
    let h0 = sparse_beamspace_vector(&truth.blocks[0].paths, &arrays, &cfg.ofdm, Side::Ms);
    noise_psd_for_snr(snr_db, &probe, &h0)
}

/// First-block training of one trial, with the same streams as [`run_training_tracking`].
pub fn run_first_training(cfg: &ExperimentConfig, snr_db: f64, seed: u64) -> Result<(TruthBlock, TrainingOutcome)> {
    cfg.validate()?;
    let truth = sample_trajectory(cfg, seed)?;
    let sensing_seed = derive_seed(seed, 3);
    let noise_psd = trial_noise_psd(cfg, &truth, snr_db, sensing_seed)?;
    let mut rng: SimRng = seeded_rng(derive_seed(seed, 2 ^ snr_db.to_bits()));
    let refine = cfg.refine.then_some(cfg.refine_points);
    let outcome = run_training(&truth.blocks[0].paths, &cfg.arrays(), &cfg.ofdm, &cfg.training, noise_psd, refine, derive_seed(sensing_seed, 10), &mut rng)?;
    Ok((truth.blocks[0].clone(), outcome))
}

/// Runs one trial: two trainings, filter initialization and tracking over all blocks.
pub fn run_training_tracking(cfg: &ExperimentConfig, snr_db: f64, trial: usize, seed: u64) -> Result<TrialRecord> {
    cfg.validate()?;
    let arrays = cfg.arrays();
    let ofdm = cfg.ofdm;
    let truth = sample_trajectory(cfg, seed)?;
    let mut rng: SimRng = seeded_rng(derive_seed(seed, 2 ^ snr_db.to_bits()));
    let sensing_seed = derive_seed(seed, 3);

    let noise_psd = trial_noise_psd(cfg, &truth, snr_db, sensing_seed)?;
    let refine = cfg.refine.then_some(cfg.refine_points);

    let mut trainings = Vec::with_capacity(2);
    for m in 0..2 {
        trainings.push(run_training(&truth.blocks[m].paths, &arrays, &ofdm, &cfg.training, noise_psd, refine, derive_seed(sensing_seed, 10 + m as u64), &mut rng)?);
    }
    let residual_error = trainings[0].residual_error();
    let k_hat = trainings[0].result.k_hat();
    let los_beam = dominant_beam(&arrays.ms, truth.blocks[0].phi);
    let los_detected = trainings[0].downlink.support_union().binary_search(&los_beam).is_ok();
    let los: Vec<LosEstimate> = match trainings.iter().map(|t| LosEstimate::from_training(&t.result)).collect::<Result<Vec<_>>>() {
        Ok(v) => v,
        Err(e) => return Ok(failed(snr_db, trial, seed, e.to_string(), residual_error, k_hat)),
    };

    let mut los = los;
    if let Some(cells) = cfg.init_gate_cells {
        let delay_gate = ofdm.sample_period();
        let dl_pair = associate_or_strongest(&trainings[0].dl_candidates, &trainings[1].dl_candidates, arrays.ms.n_elements, cells, delay_gate);
        for (m, c) in dl_pair.into_iter().enumerate() {
            los[m].phi = c.angle;
            los[m].tau = c.tau;
        }
        let ul_pair = associate_or_strongest(&trainings[0].ul_candidates, &trainings[1].ul_candidates, arrays.bs.n_elements, cells, delay_gate);
        for (m, c) in ul_pair.into_iter().enumerate() {
            los[m].theta = c.angle;
        }
    }

    let unc = cfg.initial_uncertainty;
    let mut trace = Vec::with_capacity(cfg.n_blocks());
    for (m, (est, tb)) in los.iter().zip(&truth.blocks).take(2).enumerate() {
        let (pe, ae, sp, sa) = training_pose(&truth.q, est, &unc, tb)?;
        trace.push(BlockTrace {
            block: m,
            tau: tb.tau,
            theta: tb.theta,
            phi: tb.phi,
            tau_hat: est.tau,
            theta_hat: est.theta,
            phi_hat: est.phi,
            p_err: pe,
            alpha_err: ae,
            sigma_p: sp,
            sigma_alpha: sa,
            nis_ul: None,
            nis_dl: None,
        });
    }

    let (mut ul, mut dl): (TrackState, TrackState) = init_state_from(&los[0], &los[1], cfg.t_b, &unc)?;
    if cfg.motion_model == MotionModel::ConstantAcceleration {
        ul = extend_with_acceleration(&ul, 2);
        dl = extend_with_acceleration(&dl, 1);
    }
    let f_ul = make_transition_for(2, cfg.t_b, cfg.motion_model);
    let f_dl = make_transition_for(1, cfg.t_b, cfg.motion_model);
    let q_ul = discretize_process_noise_for(&cfg.process_noise, cfg.t_b, Link::Uplink, cfg.motion_model);
    let q_dl = discretize_process_noise_for(&cfg.process_noise, cfg.t_b, Link::Downlink, cfg.motion_model);
    let m_bs = cfg.receive_beams(Link::Uplink)?;
    let m_ms = cfg.receive_beams(Link::Downlink)?;
    let pilot_ul_amp = num_complex::Complex64::new(cfg.pilot_power(Link::Uplink).sqrt(), 0.0);
    let pilot_dl_amp = num_complex::Complex64::new(cfg.pilot_power(Link::Downlink).sqrt(), 0.0);
    let inflation = num_complex::Complex64::new(noise_psd.max(1e-300) * cfg.measurement_inflation, 0.0);

    fn step<M: crate::tracking::MeasurementModel>(
        cfg: &ExperimentConfig,
        pred: &TrackState,
        y: &crate::util::CVector,
        noise: &MeasurementNoise,
        model: &M,
    ) -> Result<(TrackState, crate::tracking::StepInfo)> {
        match &cfg.search {
            Some(g) => ekf_update_searched(pred, y, noise, model, cfg.ekf_iterations, g),
            None => ekf_update_iterated(pred, y, noise, model, cfg.ekf_iterations),
        }
    }
    for m in 2..cfg.n_blocks() {
        let tb = &truth.blocks[m];
        let ul_pred = ekf_predict(&ul, &f_ul, &q_ul);
        let dl_pred = ekf_predict(&dl, &f_dl, &q_dl);
        let phi_pred = dl_pred.param(0);

        let beams_ul = link_beams(cfg, &arrays, Link::Uplink, phi_pred, dl_pred.variance(0).sqrt(), ul_pred.param(1), m_bs)?;
        let pilot_ul = default_pilot(&ofdm, beams_ul.m_tx()) * pilot_ul_amp;
        let y_ul = synthesize_tracking_rx(&tb.paths, &beams_ul, &pilot_ul, &ofdm, noise_psd, &mut rng)?;
        let noise_ul = MeasurementNoise::new(ridged(&beams_ul.rx_gram) * inflation, ofdm.n_subcarriers)?;
        let model_ul = UplinkModel { beams: beams_ul, pilot: pilot_ul, ofdm, phi: phi_pred };
        let (ul_new, info_ul) = match step(cfg, &ul_pred, &y_ul, &noise_ul, &model_ul) {
            Ok(v) => v,
            Err(e) => return Ok(failed(snr_db, trial, seed, format!("uplink update at block {m}: {e}"), residual_error, k_hat)),
        };
        ul = ul_new;

        let (tau_hat, theta_hat) = (ul.param(0), ul.param(1));
        let beams_dl = link_beams(cfg, &arrays, Link::Downlink, theta_hat, ul.variance(1).sqrt(), phi_pred, m_ms)?;
        let pilot_dl = default_pilot(&ofdm, beams_dl.m_tx()) * pilot_dl_amp;
        let y_dl = synthesize_tracking_rx(&tb.paths, &beams_dl, &pilot_dl, &ofdm, noise_psd, &mut rng)?;
        let noise_dl = MeasurementNoise::new(ridged(&beams_dl.rx_gram) * inflation, ofdm.n_subcarriers)?;
        let model_dl = DownlinkModel { beams: beams_dl, pilot: pilot_dl, ofdm, tau: tau_hat, theta: theta_hat };
        let (dl_new, info_dl) = match step(cfg, &dl_pred, &y_dl, &noise_dl, &model_dl) {
            Ok(v) => v,
            Err(e) => return Ok(failed(snr_db, trial, seed, format!("downlink update at block {m}: {e}"), residual_error, k_hat)),
        };
        dl = dl_new;

        let p_ul = ul.cov.view((0, 0), (2, 2)).into_owned();
        let pose = match estimate_pose(&truth.q, tau_hat.max(1e-12), theta_hat, dl.param(0), &p_ul, dl.variance(0)) {
            Ok(p) => p,
            Err(e) => return Ok(failed(snr_db, trial, seed, format!("pose at block {m}: {e}"), residual_error, k_hat)),
        };
        trace.push(BlockTrace {
            block: m,
            tau: tb.tau,
            theta: tb.theta,
            phi: tb.phi,
            tau_hat,
            theta_hat,
            phi_hat: dl.param(0),
            p_err: (pose.p_hat - tb.p).norm(),
            alpha_err: angle_diff(pose.alpha_hat, tb.alpha).abs(),
            sigma_p: pose.p_cov.trace().max(0.0).sqrt(),
            sigma_alpha: pose.alpha_var.max(0.0).sqrt(),
            nis_ul: Some(info_ul.nis / info_ul.dof as f64),
            nis_dl: Some(info_dl.nis / info_dl.dof as f64),
        });
    }
    if trace.iter().any(|t| !(t.p_err.is_finite() && t.alpha_err.is_finite())) {
        return Ok(failed(snr_db, trial, seed, "non-finite estimate".into(), residual_error, k_hat));
    }
    Ok(TrialRecord {
        snr_db,
        trial,
        seed,
        failure: None,
        p_err: trace.iter().map(|t| t.p_err).collect(),
        alpha_err: trace.iter().map(|t| t.alpha_err).collect(),
        residual_error,
        los_detected,
        k_hat,
        trace,
    })
}

/// Gram matrix with a relative ridge so coincident beams near end-fire stay invertible.
fn ridged(gram: &crate::util::CMatrix) -> crate::util::CMatrix {
    let scale = (0..gram.nrows()).map(|i| gram[(i, i)].re).fold(0.0, f64::max).max(1e-300);
    gram + crate::util::CMatrix::identity(gram.nrows(), gram.ncols()) * num_complex::Complex64::new(1e-9 * scale, 0.0)
}

/// Appends zero accelerations with a wide prior to a constant-rate state.
fn extend_with_acceleration(s: &TrackState, n_params: usize) -> TrackState {
    let n = s.dim();
    let mut psi = DVector::zeros(n + n_params);
    psi.rows_mut(0, n).copy_from(&s.psi);
    let mut cov = DMatrix::zeros(n + n_params, n + n_params);
    cov.view_mut((0, 0), (n, n)).copy_from(&s.cov);
    for i in 0..n_params {
        cov[(n + i, n + i)] = s.cov[(n_params + i, n_params + i)] / s.block_duration.powi(2);
    }
    TrackState { psi, cov, block_index: s.block_index, block_duration: s.block_duration }
}

/// Error statistics of one block across valid trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block: usize,
    pub rmse_p: f64,
    pub rmse_alpha: f64,
    pub mean_p: f64,
    pub median_p: f64,
    pub max_p: f64,
    pub mean_alpha: f64,
    pub median_alpha: f64,
    pub max_alpha: f64,
}

/// Aggregate metrics at one SNR point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub snr_db: f64,
    pub n_elements: usize,
    pub sigma_theta: f64,
    pub blocks: Vec<BlockStats>,
    /// Maximum over blocks of the per-block RMSE.
    pub rmse_max_p: f64,
    pub rmse_max_alpha: f64,
    /// Median normalized downlink training residual.
    pub residual_error: f64,
    /// Fraction of trials whose LOS dominant beam was detected.
    pub detection_probability: f64,
    pub n_valid: usize,
    pub n_failed: usize,
    pub t_train: f64,
    pub t_track: f64,
}

impl MetricsRecord {
    pub fn final_block(&self) -> Option<&BlockStats> {
        self.blocks.last()
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn column_stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len().max(1) as f64;
    let rmse = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let mean = values.iter().sum::<f64>() / n;
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut tmp = values.to_vec();
    (rmse, mean, median(&mut tmp), max)
}

/// Aggregates trials of one SNR point.
pub fn aggregate(cfg: &ExperimentConfig, snr_db: f64, trials: &[TrialRecord]) -> MetricsRecord {
    let valid: Vec<&TrialRecord> = trials.iter().filter(|t| t.failure.is_none()).collect();
    let n_blocks = valid.iter().map(|t| t.p_err.len()).min().unwrap_or(0);
    let blocks = (0..n_blocks)
        .map(|b| {
            let p: Vec<f64> = valid.iter().map(|t| t.p_err[b]).collect();
            let a: Vec<f64> = valid.iter().map(|t| t.alpha_err[b]).collect();
            let (rp, mp, medp, maxp) = column_stats(&p);
            let (ra, ma, meda, maxa) = column_stats(&a);
            BlockStats {
                block: b,
                rmse_p: rp,
                rmse_alpha: ra,
                mean_p: mp,
                median_p: medp,
                max_p: maxp,
                mean_alpha: ma,
                median_alpha: meda,
                max_alpha: maxa,
            }
        })
        .collect::<Vec<_>>();
    let mut residuals: Vec<f64> = trials.iter().map(|t| t.residual_error).collect();
    let timing = training_time_report(
        cfg.carrier.n_bs,
        cfg.carrier.n_ms,
        cfg.training.g_beams,
        cfg.ofdm.sample_period(),
        &HierarchyParams::default(),
    );
    MetricsRecord {
        snr_db,
        n_elements: cfg.carrier.n_bs,
        sigma_theta: cfg.process_noise.sigma_theta,
        rmse_max_p: blocks.iter().map(|b| b.rmse_p).fold(f64::NAN, f64::max),
        rmse_max_alpha: blocks.iter().map(|b| b.rmse_alpha).fold(f64::NAN, f64::max),
        blocks,
        residual_error: median(&mut residuals),
        detection_probability: trials.iter().filter(|t| t.los_detected).count() as f64 / trials.len().max(1) as f64,
        n_valid: valid.len(),
        n_failed: trials.len() - valid.len(),
        t_train: timing.proposed,
        t_track: timing.tracking,
    }
}

/// Trial seed derived from the master seed; shared across SNR points.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, trial as u64)
}

/// Monte Carlo results for every SNR point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricsRecord>,
    pub trials: Vec<Vec<TrialRecord>>,
}

/// Runs every (SNR, trial) pair in parallel and aggregates per SNR.
pub fn monte_carlo(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.snr_sweep.is_empty() {
        return Err(invalid("SNR sweep is empty"));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.snr_sweep.len()).flat_map(|s| (0..cfg.n_trials).map(move |t| (s, t))).collect();
    let records: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(s, t)| run_training_tracking(cfg, cfg.snr_sweep[s], t, trial_seed(cfg.rng_seed, t)))
        .collect::<Result<Vec<_>>>()?;
    let mut trials: Vec<Vec<TrialRecord>> = vec![Vec::with_capacity(cfg.n_trials); cfg.snr_sweep.len()];
    for ((s, _), r) in jobs.into_iter().zip(records) {
        trials[s].push(r);
    }
    let metrics = cfg.snr_sweep.iter().zip(&trials).map(|(&snr, tr)| aggregate(cfg, snr, tr)).collect();
    Ok(SweepResult { config: cfg.clone(), metrics, trials })
}

#[derive(Debug, Serialize)]
struct BlockRow {
    snr_db: f64,
    n_elements: usize,
    sigma_theta_deg: f64,
    block: usize,
    rmse_p_m: f64,
    rmse_alpha_deg: f64,
    mean_p_m: f64,
    median_p_m: f64,
    max_p_m: f64,
    mean_alpha_deg: f64,
    median_alpha_deg: f64,
    max_alpha_deg: f64,
    n_valid: usize,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    snr_db: f64,
    n_elements: usize,
    sigma_theta_deg: f64,
    rmse_max_p_m: f64,
    rmse_max_alpha_deg: f64,
    residual_error: f64,
    detection_probability: f64,
    n_valid: usize,
    n_failed: usize,
    t_train_s: f64,
    t_track_s: f64,
}

/// Writes one trial's per-block trace as CSV.
pub fn write_trace(trace: &[BlockTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for b in trace {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `summary.csv`, `config_echo.json` and optional traces into `dir`.
pub fn write_outputs(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let results = dir.join("results.csv");
    let mut w = csv::Writer::from_path(&results)?;
    for m in &result.metrics {
        for b in &m.blocks {
            w.serialize(BlockRow {
                snr_db: m.snr_db,
                n_elements: m.n_elements,
                sigma_theta_deg: m.sigma_theta / DEG,
                block: b.block,
                rmse_p_m: b.rmse_p,
                rmse_alpha_deg: b.rmse_alpha / DEG,
                mean_p_m: b.mean_p,
                median_p_m: b.median_p,
                max_p_m: b.max_p,
                mean_alpha_deg: b.mean_alpha / DEG,
                median_alpha_deg: b.median_alpha / DEG,
                max_alpha_deg: b.max_alpha / DEG,
                n_valid: m.n_valid,
            })?;
        }
    }
    w.flush()?;
    written.push(results);

    let summary = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    for m in &result.metrics {
        w.serialize(SummaryRow {
            snr_db: m.snr_db,
            n_elements: m.n_elements,
            sigma_theta_deg: m.sigma_theta / DEG,
            rmse_max_p_m: m.rmse_max_p,
            rmse_max_alpha_deg: m.rmse_max_alpha / DEG,
            residual_error: m.residual_error,
            detection_probability: m.detection_probability,
            n_valid: m.n_valid,
            n_failed: m.n_failed,
            t_train_s: m.t_train,
            t_track_s: m.t_track,
        })?;
    }
    w.flush()?;
    written.push(summary);

    let echo = dir.join("config_echo.json");
    fs::write(&echo, serde_json::to_string_pretty(&result.config)?)?;
    written.push(echo);

    if result.config.write_traces {
        let tdir = dir.join("traces");
        fs::create_dir_all(&tdir)?;
        for tr in result.trials.iter().flatten() {
            let path = tdir.join(format!("trace_snr{}_trial{:04}.csv", tr.snr_db, tr.trial));
            write_trace(&tr.trace, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// [`monte_carlo`] followed by [`write_outputs`] when a directory is given.
pub fn monte_carlo_sweep(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<SweepResult> {
    let result = monte_carlo(cfg)?;
    if let Some(dir) = out_dir {
        write_outputs(&result, dir)?;
    }
    Ok(result)
}

/// Parameters of the hierarchical-codebook training time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyParams {
    /// Precoders per stage `M_G`.
    pub m_g: usize,
    /// Grid resolution `N_G` (resolution `2π/N_G`).
    pub n_g: usize,
    pub n_rf: usize,
    /// Detected NLOS paths `K̂`.
    pub k_hat: usize,
}

impl Default for HierarchyParams {
    fn default() -> Self {
        Self { m_g: 2, n_g: 32, n_rf: 1, k_hat: 2 }
    }
}

/// Training and tracking durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// `2·G·T_s`.
    pub proposed: f64,
    /// `T_s·N_BS·N_MS`.
    pub exhaustive: f64,
    /// `T_s·M_G·(K̂+1)²·⌈M_G(K̂+1)/N_RF⌉·log_{M_G}(N_G/(K̂+1))`.
    pub hierarchical: f64,
    /// `2·T_s`.
    pub tracking: f64,
}

pub fn training_time_report(n_bs: usize, n_ms: usize, g: usize, t_s: f64, h: &HierarchyParams) -> TimingReport {
    let k1 = (h.k_hat + 1) as f64;
    let m_g = h.m_g as f64;
    let stages = if h.m_g >= 2 && h.n_g > 0 { ((h.n_g as f64 / k1).ln() / m_g.ln()).max(0.0) } else { 0.0 };
    let rf_rounds = (m_g * k1 / h.n_rf.max(1) as f64).ceil();
    TimingReport {
        proposed: 2.0 * g as f64 * t_s,
        exhaustive: t_s * (n_bs * n_ms) as f64,
        hierarchical: t_s * m_g * k1 * k1 * rf_rounds * stages,
        tracking: 2.0 * t_s,
    }
}

/// Settings of the support-detection versus OMP comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub carrier: CarrierConfig,
    pub ofdm: OfdmConfig,
    pub training: TrainingConfig,
    pub v_values: Vec<usize>,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub rng_seed: u64,
    /// Scene draws: distance, BS angle and MS angle ranges.
    pub distance: [f64; 2],
    pub theta: [f64; 2],
    pub phi: [f64; 2],
    pub n_scatterers: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            carrier: CarrierConfig::default(),
            ofdm: OfdmConfig::default(),
            training: TrainingConfig::default(),
            v_values: vec![3, 5],
            snr_db: vec![-10.0, -5.0, 0.0],
            trials: 100,
            rng_seed: 7,
            distance: [3.0, 8.0],
            theta: [-50.0 * DEG, 50.0 * DEG],
            phi: [-50.0 * DEG, 50.0 * DEG],
            n_scatterers: 2,
        }
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub v: usize,
    pub snr_db: f64,
    /// Median over trials of the OMP over support-detection final residual energy.
    pub median_ratio: f64,
    pub median_sd_residual: f64,
    pub median_cs_residual: f64,
    /// Fraction of trials whose LOS dominant beam lies in the detected support.
    pub sd_detection: f64,
    pub cs_detection: f64,
    pub trials: usize,
}

/// Random off-grid scene for the comparison.
fn study_scene(cfg: &StudyConfig, rng: &mut SimRng) -> Result<Scene> {
    let q = Vector2::zeros();
    let d = uniform(rng, cfg.distance);
    let theta = uniform(rng, cfg.theta);
    let phi = uniform(rng, cfg.phi);
    let (p, alpha) = crate::localization::params_to_pose(&q, d / SPEED_OF_LIGHT, theta, phi);
    let scatterers = (0..cfg.n_scatterers).map(|_| Vector2::new(uniform(rng, [1.0, 10.0]), uniform(rng, [-8.0, 8.0]))).collect();
    Scene::new(q, p, alpha, scatterers)
}

/// Downlink support detection versus the OMP baseline on identical observations.
pub fn sd_vs_cs_study(cfg: &StudyConfig) -> Result<Vec<StudyRow>> {
    if cfg.trials == 0 || cfg.v_values.is_empty() || cfg.snr_db.is_empty() {
        return Err(invalid("study needs trials, V values and SNR points"));
    }
    let l = cfg.carrier.wavelength();
    let arrays = ArrayPair { bs: ArrayConfig::half_wavelength(cfg.carrier.n_bs, l), ms: ArrayConfig::half_wavelength(cfg.carrier.n_ms, l) };
    let mut rows = Vec::new();
    for &v in &cfg.v_values {
        for (si, &snr) in cfg.snr_db.iter().enumerate() {
            let per: Vec<(f64, f64, f64, bool, bool)> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| -> Result<_> {
                    let seed = derive_seed(cfg.rng_seed, t as u64);
                    let mut rng = seeded_rng(derive_seed(seed, 1));
                    let scene = study_scene(cfg, &mut rng)?;
                    let paths = generate_paths(&scene, &cfg.carrier, derive_seed(seed, 2))?;
                    let h = sparse_beamspace_vector(&paths, &arrays, &cfg.ofdm, Side::Ms);
                    let tc = TrainingConfig { rng_seed: derive_seed(seed, 3), v_elements: v, ..cfg.training.clone() };
                    let s = make_sensing_matrix(arrays.ms.n_elements, &tc, &cfg.ofdm)?;
                    let n0 = noise_psd_for_snr(snr, &s, &h)?;
                    let mut nrng = seeded_rng(derive_seed(seed, 100 + si as u64));
                    let y = synthesize_training_rx(&h, &s, n0, &mut nrng)?;
                    let delta = cfar_threshold(y.len(), arrays.ms.n_elements, tc.p_fa, s.mean_noise_variance(n0))?;
                    let sd = sd_estimate(&y, &s, &arrays.ms, v, delta, tc.max_iterations)?;
                    let cs = cs_baseline_estimate(&y, &s, &arrays.ms, v, delta, tc.max_iterations)?;
                    let los = dominant_beam(&arrays.ms, paths[0].phi);
                    let (rs, rc) = (normalized_residual(&sd), normalized_residual(&cs));
                    Ok((rc / rs.max(1e-300), rs, rc, sd.support_union().contains(&los), cs.support_union().contains(&los)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut ratio: Vec<f64> = per.iter().map(|r| r.0).collect();
            let mut rs: Vec<f64> = per.iter().map(|r| r.1).collect();
            let mut rc: Vec<f64> = per.iter().map(|r| r.2).collect();
            let n = per.len() as f64;
            rows.push(StudyRow {
                v,
                snr_db: snr,
                median_ratio: median(&mut ratio),
                median_sd_residual: median(&mut rs),
                median_cs_residual: median(&mut rc),
                sd_detection: per.iter().filter(|r| r.3).count() as f64 / n,
                cs_detection: per.iter().filter(|r| r.4).count() as f64 / n,
                trials: per.len(),
            });
        }
    }
    Ok(rows)
}

/// Dominant-operation counts of one support-detection iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub g: usize,
    pub n_subcarriers: usize,
    pub n_antennas: usize,
    pub correlation_macs: f64,
    pub ls_macs: f64,
}

/// Measures per-iteration operation counts of a noiseless single-path run.
pub fn complexity_point(g: usize, n_subcarriers: usize, n_antennas: usize) -> Result<ComplexityRow> {
    let l = SPEED_OF_LIGHT / 60e9;
    let arrays = ArrayPair { bs: ArrayConfig::half_wavelength(n_antennas, l), ms: ArrayConfig::half_wavelength(n_antennas, l) };
    let ofdm = OfdmConfig { n_subcarriers, ..OfdmConfig::default() };
    let path = PathParams {
        tau: 20e-9,
        theta: 0.1,
        phi: 0.23,
        gain: num_complex::Complex64::new(1.0, 0.0),
        path_loss: 1.0,
        kind: crate::scene::PathKind::Los,
    };
    let h = sparse_beamspace_vector(&[path], &arrays, &ofdm, Side::Ms);
    let s = make_sensing_matrix(n_antennas, &TrainingConfig { g_beams: g, ..TrainingConfig::default() }, &ofdm)?;
    let y = synthesize_training_rx(&h, &s, 0.0, &mut seeded_rng(0))?;
    let est = sd_estimate(&y, &s, &arrays.ms, 3, 1e-9 * total_energy(&y), 1)?;
    let it = est.ops.iterations.max(1) as f64;
    Ok(ComplexityRow {
        g,
        n_subcarriers,
        n_antennas,
        correlation_macs: est.ops.correlation_macs as f64 / it,
        ls_macs: est.ops.ls_macs as f64 / it,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(invalid("exponent fit needs at least two positive pairs"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(invalid("exponent fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quick(n_trials: usize, t_ob: f64) -> ExperimentConfig {
        ExperimentConfig { n_trials, t_ob, snr_sweep: vec![10.0], ..ExperimentConfig::default() }
    }

    #[test]
    fn default_block_count() {
        assert_eq!(ExperimentConfig::default().n_blocks(), 60);
        assert_eq!(ExperimentConfig::default().receive_beams(Link::Uplink).unwrap(), 7);
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig { t_b: 1.0, t_ob: 0.5, ..ExperimentConfig::default() }.validate().is_err());
        assert!(ExperimentConfig { n_trials: 0, ..ExperimentConfig::default() }.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig { n_trials: 7, refine: true, ..ExperimentConfig::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml_str("n_trials = 3\n[training]\ng_beams = 20\n").unwrap();
        assert_eq!(partial.n_trials, 3);
        assert_eq!(partial.training.g_beams, 20);
        assert_eq!(partial.training.v_elements, 3);
        assert!(ExperimentConfig::from_toml_str("t_b = -1.0").is_err());
    }

    #[test]
    fn block_duration_helper() {
        assert_relative_eq!(block_duration_for(5.0, 4.0, 32).unwrap(), 5.0 / 128.0);
        assert!(block_duration_for(0.0, 4.0, 32).is_err());
    }

    #[test]
    fn truth_without_process_noise_follows_nominal_rates() {
        let cfg = ExperimentConfig {
            truth_process_noise: Some(ProcessNoiseConfig { sigma_tau: 0.0, sigma_theta: 0.0, sigma_phi: 0.0, cross_corr: 0.0 }),
            ..quick(1, 0.1)
        };
        let tr = sample_trajectory(&cfg, 3).unwrap();
        assert_eq!(tr.blocks.len(), 10);
        for w in tr.blocks.windows(2) {
            assert_relative_eq!(w[1].theta - w[0].theta, 0.4529 * DEG, epsilon = 1e-12);
            assert_relative_eq!(w[1].phi - w[0].phi, 0.2265 * DEG, epsilon = 1e-12);
            assert_relative_eq!(w[1].tau, w[0].tau, epsilon = 1e-18);
        }
        let b = &tr.blocks[4];
        assert_relative_eq!(b.paths[0].theta, b.theta, epsilon = 1e-9);
        assert_relative_eq!(b.paths[0].phi, b.phi, epsilon = 1e-9);
        assert_eq!(b.paths.len(), 3);
    }

    #[test]
    fn cwna_increment_moments() {
        let mut rng = seeded_rng(4);
        let (t, sigma) = (0.01, 2.0);
        let n = 20000;
        let (mut sxx, mut svv, mut sxv) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let (x, v) = cwna_increment(sigma, t, &mut rng);
            sxx += x * x;
            svv += v * v;
            sxv += x * v;
        }
        let nf = n as f64;
        assert_relative_eq!(sxx / nf, sigma * sigma * t.powi(3) / 3.0, max_relative = 0.05);
        assert_relative_eq!(svv / nf, sigma * sigma * t, max_relative = 0.05);
        assert_relative_eq!(sxv / nf, sigma * sigma * t * t / 2.0, max_relative = 0.05);
    }

    #[test]
    fn trial_is_deterministic() {
        let cfg = quick(1, 0.1);
        let a = run_training_tracking(&cfg, 10.0, 0, 11).unwrap();
        let b = run_training_tracking(&cfg, 10.0, 0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.p_err.len(), 10);
        let c = run_training_tracking(&cfg, 10.0, 0, 12).unwrap();
        assert_ne!(a.p_err, c.p_err);
    }

    #[test]
    fn aggregate_of_identical_trials_equals_single() {
        let cfg = quick(1, 0.1);
        let r = run_training_tracking(&cfg, 5.0, 0, 21).unwrap();
        let one = aggregate(&cfg, 5.0, std::slice::from_ref(&r));
        let many = aggregate(&cfg, 5.0, &[r.clone(), r.clone(), r.clone()]);
        for (a, b) in one.blocks.iter().zip(&many.blocks) {
            assert_relative_eq!(a.rmse_p, b.rmse_p, max_relative = 1e-12);
            assert_relative_eq!(a.rmse_alpha, b.rmse_alpha, max_relative = 1e-12);
            assert_relative_eq!(a.rmse_p, r.p_err[a.block], max_relative = 1e-12);
        }
        assert_relative_eq!(one.rmse_max_p, many.rmse_max_p, max_relative = 1e-12);
    }

    #[test]
    fn failed_trials_are_counted_not_averaged() {
        let cfg = quick(1, 0.1);
        let good = run_training_tracking(&cfg, 5.0, 0, 21).unwrap();
        let bad = failed(5.0, 1, 0, "no path detected".into(), 1.0, None);
        let m = aggregate(&cfg, 5.0, &[good.clone(), bad]);
        assert_eq!((m.n_valid, m.n_failed), (1, 1));
        assert_relative_eq!(m.blocks[3].rmse_p, good.p_err[3], max_relative = 1e-12);
    }

    #[test]
    fn timing_closed_forms() {
        let r = training_time_report(32, 32, 16, 5e-9, &HierarchyParams::default());
        assert_relative_eq!(r.proposed, 160e-9, max_relative = 1e-12);
        assert_relative_eq!(r.exhaustive, 1024.0 * 5e-9, max_relative = 1e-12);
        assert_relative_eq!(r.tracking, 10e-9, max_relative = 1e-12);
        let h = HierarchyParams { m_g: 2, n_g: 64, n_rf: 2, k_hat: 1 };
        let r = training_time_report(32, 32, 16, 1.0, &h);
        assert_relative_eq!(r.hierarchical, 2.0 * 4.0 * 2.0 * 5.0, max_relative = 1e-12);
        for g in 1..600 {
            let r = training_time_report(32, 32, g, 1.0, &HierarchyParams::default());
            assert_eq!(r.proposed < r.exhaustive, 2 * g < 1024);
        }
    }

    #[test]
    fn exponent_fit_recovers_power_law() {
        let xs = [16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert_relative_eq!(fit_exponent(&xs, &ys).unwrap(), 1.5, epsilon = 1e-12);
        assert!(fit_exponent(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { write_traces: true, ..quick(2, 0.05) };
        let res = monte_carlo_sweep(&cfg, Some(dir.path())).unwrap();
        assert_eq!(res.metrics.len(), 1);
        for name in ["results.csv", "summary.csv", "config_echo.json"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let echo: ExperimentConfig = serde_json::from_str(&fs::read_to_string(dir.path().join("config_echo.json")).unwrap()).unwrap();
        assert_eq!(echo, cfg);
        let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 5);
        assert_eq!(fs::read_dir(dir.path().join("traces")).unwrap().count(), 2);
    }

    fn cand(deg: f64, tau_ns: f64, magnitude: f64) -> Candidate {
        Candidate { angle: deg.to_radians(), tau: tau_ns * 1e-9, magnitude }
    }

    #[test]
    fn association_keeps_consistent_leading_pair() {
        let a = [cand(-30.0, 19.0, 1.0), cand(10.0, 30.0, 0.5)];
        let b = [cand(-31.0, 19.1, 1.0), cand(10.0, 30.0, 0.9)];
        assert_eq!(associate(&a, &b, 32, 2.5, 5e-9), Some((0, 0)));
    }

    #[test]
    fn association_rejects_delay_or_angle_mismatch() {
        let a = [cand(-65.0, 18.8, 0.08), cand(-16.3, 19.0, 0.03)];
        let b = [cand(-16.3, 19.0, 0.07), cand(-57.5, 30.9, 0.01)];
        assert_eq!(associate(&a, &b, 32, 2.5, 5e-9), Some((1, 0)));
        let c = [cand(51.4, 13.6, 0.06), cand(1.8, 13.5, 0.03)];
        let d = [cand(-36.4, 13.5, 0.1), cand(-5.4, 14.0, 0.01)];
        assert_eq!(associate(&d, &c, 32, 2.5, 5e-9), None);
        let both = associate_or_strongest(&d, &c, 32, 2.5, 5e-9);
        assert_eq!(both, vec![d[0], d[0]]);
    }
}
