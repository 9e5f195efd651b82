//! Sparse beamspace training: support-detection extraction, an OMP baseline,
//! CFAR stopping, delay/gain recovery and local angular refinement.
//!
//! The stopping test compares the matched-filter energy of the strongest
//! normalized atom, `Σ_n |ω_m̃^H r[n]|² / ‖ω_m̃[n]‖²`, with the CFAR level from
//! [`cfar_threshold`]. Under noise only that statistic is a sum of `N_sub`
//! exponential variables per atom, which is what the threshold assumes.

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::channel::{chi_vector, symmetric_index, ArrayConfig, OfdmConfig};
use crate::error::{invalid, Error, Result};
use crate::signaling::SensingMatrix;
use crate::util::{least_squares, total_energy, CMatrix, CVector};

/// CFAR stopping level `N₀·x` with `P(N, x) = (1 − p_fa)^(1/N_ant)`.
///
/// `P` is the regularized lower incomplete gamma function; the root is found on
/// the upper tail `Q(N, x) = 1 − (1 − p_fa)^(1/N_ant)` for accuracy near 1.
pub fn cfar_threshold(n_subcarriers: usize, n_ant: usize, p_fa: f64, noise_psd: f64) -> Result<f64> {
    if !(p_fa > 0.0 && p_fa < 1.0) {
        return Err(invalid("p_fa must lie strictly between 0 and 1"));
    }
    if n_subcarriers == 0 || n_ant == 0 {
        return Err(invalid("subcarrier and antenna counts must be positive"));
    }
    let a = n_subcarriers as f64;
    let tail = -((1.0 - p_fa).ln() / n_ant as f64).exp_m1();
    let f = |x: f64| gamma_ur(a, x) - tail;
    let mut lo = 0.0;
    let mut hi = a.max(1.0);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(noise_psd * 0.5 * (lo + hi))
}

/// Extraction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Extract a block of `V` neighbouring beams per iteration.
    SupportDetection,
    /// Add one beam per iteration with joint least squares (OMP).
    Omp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOptions {
    pub strategy: Strategy,
    pub v: usize,
    pub delta: f64,
    pub max_iterations: usize,
    /// Support detection only: re-solve all coefficients jointly on the union of supports after every extraction.
    pub joint_refit: bool,
}

/// One extracted path.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Storage index of the strongest beam.
    pub beam: usize,
    pub angle: f64,
    /// Storage indices of the extracted support.
    pub support: Vec<usize>,
    /// Per-subcarrier coefficients on `support`.
    pub coeffs: Vec<CVector>,
    /// Stopping statistic that admitted this path.
    pub statistic: f64,
    /// Residual at the moment the path was selected.
    pub residual_before: Vec<CVector>,
}

/// Dominant-operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub correlation_macs: u64,
    pub ls_macs: u64,
    pub iterations: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimateFlags {
    /// No path passed the first stopping test.
    pub empty: bool,
    /// Stopped by the iteration cap rather than the threshold.
    pub iteration_cap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    pub detections: Vec<Detection>,
    /// `Σ_n ‖r_t[n]‖²`, starting with the received energy.
    pub residual_history: Vec<f64>,
    pub residual: Vec<CVector>,
    pub flags: EstimateFlags,
    pub ops: OpCounter,
}

impl SparseEstimate {
    /// Number of detected NLOS paths, `None` when nothing was detected.
    pub fn k_hat(&self) -> Option<usize> {
        self.detections.len().checked_sub(1)
    }

    pub fn final_residual_energy(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&0.0)
    }

    /// Union of all detected supports.
    pub fn support_union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.detections.iter().flat_map(|d| d.support.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Support of `v` beams around storage index `center`, wrapped modulo `n`.
///
/// Even `v` spans `center − v/2 ..= center + (v−2)/2`; odd `v` spans `center ± (v−1)/2`.
pub fn sd_support(center: usize, v: usize, n: usize) -> Vec<usize> {
    let (lo, hi) = if v.is_multiple_of(2) { (v as isize / 2, (v as isize - 2) / 2) } else { ((v as isize - 1) / 2, (v as isize - 1) / 2) };
    (-lo..=hi).map(|o| (center as isize + o).rem_euclid(n as isize) as usize).collect()
}

/// Angle whose beamspace peak sits on storage index `beam`.
pub fn beam_angle(array: &ArrayConfig, beam: usize) -> f64 {
    let n = array.n_elements;
    let s = symmetric_index(beam, n) / (n as f64 * array.spacing_ratio());
    s.clamp(-1.0, 1.0).asin()
}

fn check_inputs(y: &[CVector], sensing: &SensingMatrix) -> Result<()> {
    if y.len() != sensing.n_subcarriers() {
        return Err(Error::DimensionMismatch(format!("{} observations for {} subcarriers", y.len(), sensing.n_subcarriers())));
    }
    if y.iter().any(|v| v.len() != sensing.n_beams()) {
        return Err(Error::DimensionMismatch("observation length differs from G".into()));
    }
    Ok(())
}

/// Normalized matched-filter score of every atom, summed over subcarriers.
fn atom_scores(r: &[CVector], sensing: &SensingMatrix, norms: &[Vec<f64>], ops: &mut OpCounter) -> (Vec<f64>, Vec<CVector>) {
    let n_ant = sensing.n_antennas();
    let mut score = vec![0.0; n_ant];
    let corr: Vec<CVector> = r.iter().enumerate().map(|(n, rn)| sensing.correlate(n, rn)).collect();
    for (n, c) in corr.iter().enumerate() {
        for m in 0..n_ant {
            score[m] += c[m].norm() / norms[n][m];
        }
    }
    ops.correlation_macs += (n_ant * sensing.n_beams() * r.len()) as u64;
    (score, corr)
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn restricted_columns(omega_h: &CMatrix, support: &[usize]) -> CMatrix {
    CMatrix::from_fn(omega_h.nrows(), support.len(), |g, j| omega_h[(g, support[j])])
}

/// Runs the sparse extraction loop.
///
/// `array` is the array whose beamspace is sensed; it maps beam indices to angles.
pub fn sparse_estimate(y: &[CVector], sensing: &SensingMatrix, array: &ArrayConfig, opts: &SparseOptions) -> Result<SparseEstimate> {
    check_inputs(y, sensing)?;
    if opts.v == 0 || opts.v > sensing.n_antennas() {
        return Err(invalid("V must lie in 1..=N"));
    }
    if !(opts.delta > 0.0) {
        return Err(invalid("stopping threshold must be positive"));
    }
    if array.n_elements != sensing.n_antennas() {
        return Err(Error::DimensionMismatch("array size differs from sensing matrix".into()));
    }
    let n_ant = sensing.n_antennas();
    let n_sub = y.len();
    let g = sensing.n_beams();
    let norms: Vec<Vec<f64>> = (0..n_sub).map(|n| (0..n_ant).map(|m| sensing.atom_norm(n, m).max(1e-300)).collect()).collect();
    let omega_h: Vec<CMatrix> = (0..n_sub).map(|n| sensing.omega_h(n)).collect();

    let mut ops = OpCounter::default();
    let mut residual: Vec<CVector> = y.to_vec();
    let mut history = vec![total_energy(&residual)];
    let mut detections: Vec<Detection> = Vec::new();
    let mut omp_support: Vec<usize> = Vec::new();
    let mut flags = EstimateFlags::default();

    let cap = match opts.strategy {
        Strategy::SupportDetection => opts.max_iterations,
        Strategy::Omp => opts.max_iterations.min(g),
    };
    loop {
        if detections.len() >= cap {
            flags.iteration_cap = true;
            break;
        }
        let (score, corr) = atom_scores(&residual, sensing, &norms, &mut ops);
        let beam = argmax_lowest(&score);
        let statistic: f64 = corr.iter().enumerate().map(|(n, c)| c[beam].norm_sqr() / norms[n][beam].powi(2)).sum();
        if statistic <= opts.delta {
            break;
        }
        ops.iterations += 1;
        let before = residual.clone();
        let support = match opts.strategy {
            Strategy::SupportDetection => sd_support(beam, opts.v, n_ant),
            Strategy::Omp => vec![beam],
        };
        let mut coeffs = Vec::with_capacity(n_sub);
        match opts.strategy {
            Strategy::SupportDetection if opts.joint_refit => {
                for &b in &support {
                    if !omp_support.contains(&b) {
                        omp_support.push(b);
                    }
                }
                for n in 0..n_sub {
                    let a = restricted_columns(&omega_h[n], &omp_support);
                    let c = least_squares(&a, &y[n]);
                    residual[n] = &y[n] - &a * &c;
                    coeffs.push(DVector::from_iterator(
                        support.len(),
                        support.iter().map(|b| c[omp_support.iter().position(|x| x == b).unwrap_or(0)]),
                    ));
                }
                ops.ls_macs += (n_sub * g * omp_support.len() * omp_support.len()) as u64;
            }
            Strategy::SupportDetection => {
                for n in 0..n_sub {
                    let a = restricted_columns(&omega_h[n], &support);
                    let c = least_squares(&a, &residual[n]);
                    residual[n] -= &a * &c;
                    coeffs.push(c);
                }
                ops.ls_macs += (n_sub * g * support.len() * support.len()) as u64;
            }
            Strategy::Omp => {
                if !omp_support.contains(&beam) {
                    omp_support.push(beam);
                }
                for n in 0..n_sub {
                    let a = restricted_columns(&omega_h[n], &omp_support);
                    let c = least_squares(&a, &y[n]);
                    residual[n] = &y[n] - &a * &c;
                    let idx = omp_support.iter().position(|&b| b == beam).unwrap_or(0);
                    coeffs.push(DVector::from_element(1, c[idx]));
                }
                ops.ls_macs += (n_sub * g * omp_support.len() * omp_support.len()) as u64;
            }
        }
        history.push(total_energy(&residual));
        detections.push(Detection {
            beam,
            angle: beam_angle(array, beam),
            support,
            coeffs,
            statistic,
            residual_before: before,
        });
    }
    if opts.joint_refit && opts.strategy == Strategy::SupportDetection && !detections.is_empty() {
        for n in 0..n_sub {
            let a = restricted_columns(&omega_h[n], &omp_support);
            let c = least_squares(&a, &y[n]);
            for d in detections.iter_mut() {
                for (j, b) in d.support.iter().enumerate() {
                    d.coeffs[n][j] = c[omp_support.iter().position(|x| x == b).unwrap_or(0)];
                }
            }
        }
    }
    flags.empty = detections.is_empty();
    Ok(SparseEstimate { detections, residual_history: history, residual, flags, ops })
}

/// Support-detection estimator (`V` beams per extraction).
pub fn sd_estimate(y: &[CVector], sensing: &SensingMatrix, array: &ArrayConfig, v: usize, delta: f64, max_iterations: usize) -> Result<SparseEstimate> {
    sparse_estimate(y, sensing, array, &SparseOptions { strategy: Strategy::SupportDetection, v, delta, max_iterations, joint_refit: false })
}

/// OMP baseline (one beam per iteration, joint least squares).
pub fn cs_baseline_estimate(y: &[CVector], sensing: &SensingMatrix, array: &ArrayConfig, v: usize, delta: f64, max_iterations: usize) -> Result<SparseEstimate> {
    sparse_estimate(y, sensing, array, &SparseOptions { strategy: Strategy::Omp, v, delta, max_iterations, joint_refit: false })
}

/// Uplink angles paired with downlink detections in detection order.
#[derive(Debug, Clone, PartialEq)]
pub struct UplinkAngles {
    pub angles: Vec<f64>,
    pub supports: Vec<Vec<usize>>,
    pub estimate: SparseEstimate,
    /// Uplink and downlink path counts differed; the shorter list was kept.
    pub count_mismatch: bool,
}

/// Uplink angle detection over the subcarriers carried in `y_ul`, paired by detection order.
pub fn sd_estimate_uplink(
    y_ul: &[CVector],
    sensing_bs: &SensingMatrix,
    array_bs: &ArrayConfig,
    v: usize,
    delta: f64,
    max_iterations: usize,
    downlink_paths: usize,
) -> Result<UplinkAngles> {
    let estimate = sd_estimate(y_ul, sensing_bs, array_bs, v, delta, max_iterations)?;
    let keep = estimate.detections.len().min(downlink_paths);
    let count_mismatch = estimate.detections.len() != downlink_paths;
    Ok(UplinkAngles {
        angles: estimate.detections[..keep].iter().map(|d| d.angle).collect(),
        supports: estimate.detections[..keep].iter().map(|d| d.support.clone()).collect(),
        count_mismatch,
        estimate,
    })
}

/// Search grid for delay estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayGrid {
    pub points: usize,
    pub span: f64,
    /// Parabolic interpolation around the grid peak.
    pub interpolate: bool,
}

impl DelayGrid {
    /// `16·N` points over `[0, T_CP)`.
    pub fn standard(ofdm: &OfdmConfig) -> Self {
        Self { points: 16 * ofdm.n_subcarriers, span: ofdm.cp_duration(), interpolate: true }
    }

    pub fn step(&self) -> f64 {
        self.span / self.points as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayGain {
    pub toa: f64,
    /// Complex amplitude of the aggregated support coefficient.
    pub gain: Complex64,
    /// Unit-norm principal direction of the support coefficients.
    pub direction: CVector,
}

fn delay_metric(c: &[Complex64], ofdm: &OfdmConfig, tau: f64) -> (f64, Complex64) {
    let s: Complex64 = c.iter().enumerate().map(|(n, &cn)| cn * ofdm.delay_phasor(n, tau).conj()).sum();
    (s.norm(), s)
}

/// Delay by matched filtering of the aggregated support coefficient across subcarriers,
/// then the complex amplitude by scalar least squares.
pub fn estimate_delay_gain(coeffs: &[CVector], ofdm: &OfdmConfig, grid: &DelayGrid) -> Result<DelayGain> {
    if coeffs.len() < 2 {
        return Err(invalid("delay estimation needs at least two subcarriers"));
    }
    let v = coeffs[0].len();
    if v == 0 || coeffs.iter().any(|c| c.len() != v) {
        return Err(invalid("support coefficients must be non-empty and equally sized"));
    }
    if grid.points < 3 || !(grid.span > 0.0) {
        return Err(invalid("delay grid needs at least three points and a positive span"));
    }
    let mut cov = CMatrix::zeros(v, v);
    for c in coeffs {
        cov += c * c.adjoint();
    }
    let eig = cov.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let mut s: CVector = eig.eigenvectors.column(top).into_owned();
    // fix the arbitrary eigenvector phase on the largest entry
    let pivot = s.icamax();
    let ph = s[pivot] / s[pivot].norm().max(1e-300);
    s /= ph;
    let c: Vec<Complex64> = coeffs.iter().map(|h| s.dotc(h)).collect();

    let step = grid.step();
    let values: Vec<f64> = (0..grid.points).map(|i| delay_metric(&c, ofdm, i as f64 * step).0).collect();
    let best = argmax_lowest(&values);
    let mut tau = best as f64 * step;
    if grid.interpolate && best > 0 && best + 1 < grid.points {
        let (l, m, r) = (values[best - 1], values[best], values[best + 1]);
        let denom = l - 2.0 * m + r;
        if denom < 0.0 {
            tau += 0.5 * step * (l - r) / denom;
        }
    }
    let (_, sum) = delay_metric(&c, ofdm, tau);
    Ok(DelayGain { toa: tau, gain: sum / c.len() as f64, direction: s })
}

/// Local refinement outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub angle: f64,
    pub metric: f64,
    pub coarse_metric: f64,
}

/// Matched-filter metric `Σ_n |b[n]^H r[n]| / ‖b[n]‖` with `b[n] = Ω^H[n]·χ(angle)`.
pub fn refinement_metric(angle: f64, residual: &[CVector], sensing: &SensingMatrix, array: &ArrayConfig) -> f64 {
    let chi = chi_vector(array, angle).map(|x| Complex64::new(x, 0.0));
    residual
        .iter()
        .enumerate()
        .map(|(n, r)| {
            let b = sensing.apply_h(n, &chi);
            let nb = b.norm();
            if nb > 0.0 {
                b.dotc(r).norm() / nb
            } else {
                0.0
            }
        })
        .sum()
}

/// Width in radians of one beam cell at `angle`.
pub fn coarse_cell(array: &ArrayConfig, angle: f64) -> f64 {
    let ds = 1.0 / (array.n_elements as f64 * array.spacing_ratio());
    let c = angle.cos().abs().max(ds);
    (ds / c).min(std::f64::consts::FRAC_PI_2)
}

/// Two-stage local grid search of [`refinement_metric`] around `coarse`.
///
/// Stage one scans `points` angles over `coarse ± window/2`; stage two scans the
/// same count over one stage-one step around the best point. The coarse angle
/// stays a candidate, so the metric never decreases.
pub fn angular_refine(
    coarse: f64,
    residual: &[CVector],
    sensing: &SensingMatrix,
    array: &ArrayConfig,
    window: Option<f64>,
    points: usize,
) -> Refinement {
    let window = window.unwrap_or_else(|| coarse_cell(array, coarse));
    let points = points.max(2);
    let eval = |a: f64| refinement_metric(a, residual, sensing, array);
    let coarse_metric = eval(coarse);
    let mut best = (coarse, coarse_metric);
    let scan = |lo: f64, hi: f64, best: &mut (f64, f64)| {
        let step = (hi - lo) / (points - 1) as f64;
        for i in 0..points {
            let a = lo + i as f64 * step;
            let m = eval(a);
            if m > best.1 {
                *best = (a, m);
            }
        }
        step
    };
    let step = scan(coarse - window / 2.0, coarse + window / 2.0, &mut best);
    let center = best.0;
    scan(center - step, center + step, &mut best);
    Refinement { angle: best.0, metric: best.1, coarse_metric }
}

/// Per-path training output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub aoa_dl: f64,
    pub aoa_ul: Option<f64>,
    pub toa: f64,
    pub gain: Complex64,
    pub support: Vec<usize>,
    pub support_ul: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingFlags {
    pub empty_downlink: bool,
    pub empty_uplink: bool,
    pub count_mismatch: bool,
    pub iteration_cap: bool,
}

/// Joint downlink/uplink training result, paths in detection order (path 0 is taken as LOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingResult {
    pub paths: Vec<PathEstimate>,
    pub residual_history: Vec<f64>,
    pub flags: TrainingFlags,
}

impl TrainingResult {
    pub fn k_hat(&self) -> Option<usize> {
        self.paths.len().checked_sub(1)
    }

    /// Strongest path, used as the LOS estimate; requires an uplink angle.
    pub fn los(&self) -> Result<&PathEstimate> {
        match self.paths.first() {
            Some(p) if p.aoa_ul.is_some() => Ok(p),
            Some(_) => Err(Error::MissingLos("uplink angle missing for the strongest path".into())),
            None => Err(Error::MissingLos("no path detected".into())),
        }
    }
}

/// Fraction of `true_dominant` beams contained in the detected support union.
pub fn dominant_detection_rate(estimate: &SparseEstimate, true_dominant: &[usize]) -> f64 {
    if true_dominant.is_empty() {
        return 1.0;
    }
    let union = estimate.support_union();
    let hits = true_dominant.iter().filter(|b| union.binary_search(b).is_ok()).count();
    hits as f64 / true_dominant.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sparse_beamspace_vector, storage_index, ArrayPair, Side};
    use crate::scene::{PathKind, PathParams};
    use crate::signaling::{make_sensing_matrix, synthesize_training_rx, TrainingConfig};
    use crate::util::{complex_gaussian, seeded_rng};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const LAMBDA: f64 = 0.299_792 / 60.0;

    fn arrays() -> ArrayPair {
        ArrayPair { bs: ArrayConfig::half_wavelength(32, LAMBDA), ms: ArrayConfig::half_wavelength(32, LAMBDA) }
    }

    fn path(tau: f64, theta: f64, phi: f64, gain: Complex64) -> PathParams {
        PathParams { tau, theta, phi, gain, path_loss: 1.0, kind: PathKind::Los }
    }

    fn on_grid_angle(sym: f64) -> f64 {
        (sym / 16.0f64).asin()
    }

    fn sensing(seed: u64) -> SensingMatrix {
        make_sensing_matrix(32, &TrainingConfig { rng_seed: seed, ..TrainingConfig::default() }, &OfdmConfig::default()).unwrap()
    }

    #[test]
    fn cfar_closed_form_for_single_subcarrier() {
        let d = cfar_threshold(1, 32, 1e-3, 1.0).unwrap();
        let expect = -(1.0 - 0.999f64.powf(1.0 / 32.0)).ln();
        assert_relative_eq!(d, expect, max_relative = 1e-10);
        assert_relative_eq!(d, 10.37, epsilon = 5e-3);
    }

    #[test]
    fn cfar_monotone_and_linear() {
        let a = cfar_threshold(40, 32, 1e-2, 1.0).unwrap();
        let b = cfar_threshold(40, 32, 1e-3, 1.0).unwrap();
        let c = cfar_threshold(40, 32, 1e-4, 1.0).unwrap();
        assert!(a < b && b < c);
        assert_relative_eq!(cfar_threshold(40, 32, 1e-3, 3.5).unwrap(), 3.5 * b, max_relative = 1e-12);
        assert!(cfar_threshold(4, 32, 0.0, 1.0).is_err());
        assert!(cfar_threshold(4, 32, 1.0, 1.0).is_err());
        // lower regularized gamma at the level equals the per-atom confidence
        let p = statrs::function::gamma::gamma_lr(40.0, b);
        assert_relative_eq!(p, 0.999f64.powf(1.0 / 32.0), max_relative = 1e-12);
    }

    #[test]
    fn support_wraps_with_one_based_example() {
        // one-based m̃ = 2 is storage index 1
        let s: Vec<usize> = sd_support(1, 4, 32).into_iter().map(|i| i + 1).collect();
        assert_eq!(s, vec![32, 1, 2, 3]);
        assert_eq!(sd_support(5, 3, 32), vec![4, 5, 6]);
        assert_eq!(sd_support(31, 3, 32), vec![30, 31, 0]);
        assert_eq!(sd_support(0, 1, 8), vec![0]);
    }

    #[test]
    fn beam_angle_inverts_on_grid_angles() {
        let a = arrays().ms;
        for i in 0..32 {
            let ang = beam_angle(&a, i);
            assert_eq!(crate::channel::dominant_beam(&a, ang), i);
        }
    }

    #[test]
    fn noiseless_single_on_grid_path() {
        let ofdm = OfdmConfig::default();
        let phi = on_grid_angle(-4.5);
        let truth = storage_index(-4.5, 32).unwrap();
        let paths = vec![path(20e-9, 0.2, phi, Complex64::new(0.4, -0.7))];
        let h = sparse_beamspace_vector(&paths, &arrays(), &ofdm, Side::Ms);
        for seed in 0..10 {
            let s = sensing(seed);
            let y = synthesize_training_rx(&h, &s, 0.0, &mut seeded_rng(0)).unwrap();
            let est = sd_estimate(&y, &s, &arrays().ms, 3, 1e-9, 5).unwrap();
            assert_eq!(est.detections[0].beam, truth);
            assert!((est.detections[0].angle - phi).abs() < coarse_cell(&arrays().ms, phi));
            assert_eq!(est.detections.len(), 1, "seed {seed}");
            assert_eq!(est.k_hat(), Some(0));
            let cs = cs_baseline_estimate(&y, &s, &arrays().ms, 3, 1e-9, 5).unwrap();
            assert_eq!(cs.detections[0].beam, truth);
        }
    }

    #[test]
    fn noiseless_two_separated_paths() {
        let ofdm = OfdmConfig::default();
        let paths = vec![
            path(20e-9, 0.2, on_grid_angle(-6.5), Complex64::new(1.0, 0.0)),
            path(45e-9, -0.4, on_grid_angle(7.5), Complex64::new(0.0, 0.5)),
        ];
        let h = sparse_beamspace_vector(&paths, &arrays(), &ofdm, Side::Ms);
        let s = sensing(2);
        let y = synthesize_training_rx(&h, &s, 0.0, &mut seeded_rng(0)).unwrap();
        let delta = 1e-6 * crate::util::total_energy(&y);
        let opts = SparseOptions { strategy: super::Strategy::SupportDetection, v: 3, delta, max_iterations: 5, joint_refit: true };
        let est = sparse_estimate(&y, &s, &arrays().ms, &opts).unwrap();
        assert_eq!(est.detections.len(), 2);
        assert_eq!(est.detections[0].beam, storage_index(-6.5, 32).unwrap());
        assert_eq!(est.detections[1].beam, storage_index(7.5, 32).unwrap());
        assert!(est.final_residual_energy() < delta);
    }

    #[test]
    fn uplink_subcarrier_subset_gives_same_support() {
        let ofdm = OfdmConfig::default();
        let theta = on_grid_angle(3.5);
        let paths = vec![path(20e-9, theta, 0.3, Complex64::new(1.0, 0.2))];
        let h = sparse_beamspace_vector(&paths, &arrays(), &ofdm, Side::Bs);
        let s = sensing(6);
        let y = synthesize_training_rx(&h, &s, 0.0, &mut seeded_rng(0)).unwrap();
        let full = sd_estimate_uplink(&y, &s, &arrays().bs, 3, 1e-9, 5, 1).unwrap();
        let sub = SensingMatrix { selector: s.selector.clone(), symbols: s.symbols[..1].to_vec() };
        let one = sd_estimate_uplink(&y[..1], &sub, &arrays().bs, 3, 1e-9, 5, 1).unwrap();
        assert_eq!(full.supports, one.supports);
        assert_relative_eq!(full.angles[0], theta, epsilon = 1e-12);

        let zero: Vec<CVector> = (0..ofdm.n_subcarriers).map(|_| CVector::zeros(16)).collect();
        let none = sd_estimate_uplink(&zero, &s, &arrays().bs, 3, 1e-9, 5, 1).unwrap();
        assert!(none.estimate.flags.empty && none.count_mismatch);
    }

    #[test]
    fn residual_is_monotone() {
        let ofdm = OfdmConfig::default();
        let mut rng = seeded_rng(21);
        for trial in 0..20 {
            let paths = vec![
                path(20e-9, 0.1, -0.31 + 0.01 * trial as f64, Complex64::new(1.0, 0.0)),
                path(45e-9, -0.4, 0.52, Complex64::new(0.0, 0.4)),
            ];
            let h = sparse_beamspace_vector(&paths, &arrays(), &ofdm, Side::Ms);
            let s = sensing(trial);
            let y = synthesize_training_rx(&h, &s, 5.0, &mut rng).unwrap();
            for strategy in [super::Strategy::SupportDetection, super::Strategy::Omp] {
                for joint_refit in [false, true] {
                    let opts = SparseOptions { strategy, v: 3, delta: 1e-9, max_iterations: 8, joint_refit };
                    let est = sparse_estimate(&y, &s, &arrays().ms, &opts).unwrap();
                    for w in est.residual_history.windows(2) {
                        assert!(w[1] <= w[0] * (1.0 + 1e-12));
                    }
                }
            }
        }
    }

    #[test]
    fn support_contains_true_peak_for_almost_all_angles() {
        let ofdm = OfdmConfig { n_subcarriers: 8, ..OfdmConfig::default() };
        let s = make_sensing_matrix(32, &TrainingConfig { rng_seed: 4, ..TrainingConfig::default() }, &ofdm).unwrap();
        let mut hits = 0;
        for k in 0..200 {
            let phi = -1.2 + 2.4 * k as f64 / 199.0;
            let paths = vec![path(20e-9, 0.0, phi, Complex64::new(1.0, 0.0))];
            let h = sparse_beamspace_vector(&paths, &arrays(), &ofdm, Side::Ms);
            let y = synthesize_training_rx(&h, &s, 0.0, &mut seeded_rng(0)).unwrap();
            let est = sd_estimate(&y, &s, &arrays().ms, 3, 1e-9, 1).unwrap();
            let peak = crate::channel::dominant_beam(&arrays().ms, phi);
            if est.detections[0].support.contains(&peak) {
                hits += 1;
            }
        }
        assert!(hits >= 190, "{hits} of 200");
    }

    #[test]
    fn noise_only_false_alarm_rate() {
        let ofdm = OfdmConfig::default();
        let n0 = 1.0;
        let mut false_alarms = 0;
        let trials = 400;
        let mut rng = seeded_rng(99);
        for t in 0..trials {
            let s = sensing(1000 + t);
            let sigma2 = s.mean_noise_variance(n0);
            let delta = cfar_threshold(ofdm.n_subcarriers, 32, 1e-2, sigma2).unwrap();
            let y: Vec<CVector> = (0..ofdm.n_subcarriers)
                .map(|_| CVector::from_fn(16, |_, _| complex_gaussian(&mut rng, sigma2)))
                .collect();
            let est = sd_estimate(&y, &s, &arrays().ms, 3, delta, 1).unwrap();
            if !est.detections.is_empty() {
                false_alarms += 1;
            }
        }
        assert!(false_alarms as f64 / trials as f64 <= 2e-2, "{false_alarms} alarms");
    }

    #[test]
    fn delay_recovery_on_and_off_grid() {
        let ofdm = OfdmConfig::default();
        let grid = DelayGrid { interpolate: false, ..DelayGrid::standard(&ofdm) };
        let dir = CVector::from_vec(vec![Complex64::new(0.3, 0.1), Complex64::new(1.0, 0.0), Complex64::new(-0.2, 0.4)]);
        let make = |tau: f64, phase: Complex64| -> Vec<CVector> {
            (0..ofdm.n_subcarriers).map(|n| &dir * (phase * ofdm.delay_phasor(n, tau))).collect()
        };
        let tau = 37.0 * grid.step();
        let est = estimate_delay_gain(&make(tau, Complex64::new(1.0, 0.0)), &ofdm, &grid).unwrap();
        assert_relative_eq!(est.toa, tau, epsilon = 1e-15);
        let rot = estimate_delay_gain(&make(tau, Complex64::from_polar(1.0, 2.1)), &ofdm, &grid).unwrap();
        assert_relative_eq!(rot.toa, est.toa, epsilon = 1e-15);

        let fine = DelayGrid::standard(&ofdm);
        let ts = ofdm.sample_period();
        for k in 0..50 {
            let tau = 3e-9 + k as f64 * 1.731e-9;
            let coarse = estimate_delay_gain(&make(tau, Complex64::new(0.0, 1.0)), &ofdm, &grid).unwrap();
            assert!((coarse.toa - tau).abs() <= 0.5 * grid.step() + 1e-15);
            let interp = estimate_delay_gain(&make(tau, Complex64::new(0.0, 1.0)), &ofdm, &fine).unwrap();
            assert!((interp.toa - tau).abs() <= 0.05 * ts);
        }
        assert!(estimate_delay_gain(&[], &ofdm, &grid).is_err());
    }

    #[test]
    fn refinement_improves_off_grid_angle() {
        let ofdm = OfdmConfig::default();
        let s = sensing(3);
        let a = arrays().ms;
        for k in 0..20 {
            let phi = -0.8 + 0.077 * k as f64;
            let paths = vec![path(20e-9, 0.0, phi, Complex64::new(1.0, 0.0))];
            let h = sparse_beamspace_vector(&paths, &arrays(), &ofdm, Side::Ms);
            let y = synthesize_training_rx(&h, &s, 0.0, &mut seeded_rng(0)).unwrap();
            let est = sd_estimate(&y, &s, &a, 3, 1e-9, 1).unwrap();
            let coarse = est.detections[0].angle;
            let w = coarse_cell(&a, coarse);
            let r = angular_refine(coarse, &y, &s, &a, Some(w), 64);
            assert!(r.metric >= r.coarse_metric);
            assert!((r.angle - phi).abs() <= w / 64.0, "phi={phi} got={} err={}", r.angle, (r.angle - phi).abs());
        }
        let phi = beam_angle(&a, 20);
        let paths = vec![path(20e-9, 0.0, phi, Complex64::new(1.0, 0.0))];
        let h = sparse_beamspace_vector(&paths, &arrays(), &ofdm, Side::Ms);
        let y = synthesize_training_rx(&h, &s, 0.0, &mut seeded_rng(0)).unwrap();
        let r = angular_refine(phi, &y, &s, &a, None, 64);
        assert!((r.angle - phi).abs() <= coarse_cell(&a, phi) / 64.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn support_has_v_distinct_entries(center in 0usize..32, v in 1usize..8) {
            let s = sd_support(center, v, 32);
            let mut d = s.clone();
            d.sort_unstable();
            d.dedup();
            prop_assert_eq!(d.len(), v);
            prop_assert!(s.contains(&center));
        }
    }
}
