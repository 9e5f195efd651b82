//! Extended Kalman filters over the LOS delay and angles.
//!
//! The uplink filter runs at the BS with state `[τ, θ, τ̇, θ̇]`; the downlink filter
//! runs at the MS with state `[φ, φ̇]`. Rates are per second. An optional
//! constant-acceleration variant appends second derivatives.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{Link, OfdmConfig};
use crate::error::{invalid, Error, Result};
use crate::estimation::TrainingResult;
use crate::signaling::{path_signature, LinkBeams};
use crate::util::{angle_diff, symmetrize, CMatrix, CVector};

/// Continuous-time process noise intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessNoiseConfig {
    pub sigma_tau: f64,
    pub sigma_theta: f64,
    pub sigma_phi: f64,
    /// Carried for completeness; the diagonal model does not use it.
    pub cross_corr: f64,
}

impl Default for ProcessNoiseConfig {
    fn default() -> Self {
        Self { sigma_tau: 0.5e-9, sigma_theta: 5f64.to_radians(), sigma_phi: 5f64.to_radians(), cross_corr: 0.0 }
    }
}

/// Kinematic order of the state model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MotionModel {
    /// Parameters and rates.
    #[default]
    ConstantRate,
    /// Parameters, rates and accelerations.
    ConstantAcceleration,
}

impl MotionModel {
    pub fn order(self) -> usize {
        match self {
            MotionModel::ConstantRate => 2,
            MotionModel::ConstantAcceleration => 3,
        }
    }
}

/// Transition for `[params, rates]`: `[[I, T·I], [0, I]]`.
pub fn make_transition(n_params: usize, t_b: f64) -> DMatrix<f64> {
    make_transition_for(n_params, t_b, MotionModel::ConstantRate)
}

pub fn make_transition_for(n_params: usize, t_b: f64, model: MotionModel) -> DMatrix<f64> {
    let k = model.order();
    let mut f = DMatrix::identity(k * n_params, k * n_params);
    for i in 0..n_params {
        f[(i, n_params + i)] = t_b;
        if k == 3 {
            f[(i, 2 * n_params + i)] = 0.5 * t_b * t_b;
            f[(n_params + i, 2 * n_params + i)] = t_b;
        }
    }
    f
}

/// Discretized white-noise process covariance for per-parameter intensities `sigmas`.
pub fn cwna_noise(sigmas: &[f64], t_b: f64, model: MotionModel) -> DMatrix<f64> {
    let n = sigmas.len();
    let k = model.order();
    let t = t_b;
    let block: Vec<Vec<f64>> = match model {
        MotionModel::ConstantRate => vec![vec![t.powi(3) / 3.0, t.powi(2) / 2.0], vec![t.powi(2) / 2.0, t]],
        MotionModel::ConstantAcceleration => vec![
            vec![t.powi(5) / 20.0, t.powi(4) / 8.0, t.powi(3) / 6.0],
            vec![t.powi(4) / 8.0, t.powi(3) / 3.0, t.powi(2) / 2.0],
            vec![t.powi(3) / 6.0, t.powi(2) / 2.0, t],
        ],
    };
    let mut q = DMatrix::zeros(k * n, k * n);
    for (i, s) in sigmas.iter().enumerate() {
        for a in 0..k {
            for b in 0..k {
                q[(a * n + i, b * n + i)] = s * s * block[a][b];
            }
        }
    }
    q
}

/// Process noise of the uplink (`[τ, θ]`) or downlink (`[φ]`) filter.
pub fn discretize_process_noise(config: &ProcessNoiseConfig, t_b: f64, link: Link) -> DMatrix<f64> {
    discretize_process_noise_for(config, t_b, link, MotionModel::ConstantRate)
}

pub fn discretize_process_noise_for(config: &ProcessNoiseConfig, t_b: f64, link: Link, model: MotionModel) -> DMatrix<f64> {
    match link {
        Link::Uplink => cwna_noise(&[config.sigma_tau, config.sigma_theta], t_b, model),
        Link::Downlink => cwna_noise(&[config.sigma_phi], t_b, model),
    }
}

/// Filter state with covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub psi: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub block_index: usize,
    pub block_duration: f64,
}

impl TrackState {
    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn param(&self, i: usize) -> f64 {
        self.psi[i]
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.cov[(i, i)]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.cov.clone().symmetric_eigen().eigenvalues.min()
    }
}

/// Standard deviations assumed for a single training estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialUncertainty {
    pub sigma_tau: f64,
    pub sigma_theta: f64,
    pub sigma_phi: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self { sigma_tau: 0.5e-9, sigma_theta: 2f64.to_radians(), sigma_phi: 2f64.to_radians() }
    }
}

/// LOS parameters read from training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosEstimate {
    pub tau: f64,
    pub theta: f64,
    pub phi: f64,
}

impl LosEstimate {
    pub fn from_training(t: &TrainingResult) -> Result<Self> {
        let los = t.los()?;
        Ok(Self { tau: los.toa, theta: los.aoa_ul.unwrap_or(0.0), phi: los.aoa_dl })
    }
}

fn diag_state(values: Vec<f64>, vars: Vec<f64>, t_b: f64, block: usize) -> TrackState {
    TrackState {
        psi: DVector::from_vec(values),
        cov: DMatrix::from_diagonal(&DVector::from_vec(vars)),
        block_index: block,
        block_duration: t_b,
    }
}

/// Uplink and downlink states from two consecutive training estimates.
pub fn init_state(first: &TrainingResult, second: &TrainingResult, t_b: f64, unc: &InitialUncertainty) -> Result<(TrackState, TrackState)> {
    let a = LosEstimate::from_training(first)?;
    let b = LosEstimate::from_training(second)?;
    init_state_from(&a, &b, t_b, unc)
}

pub fn init_state_from(a: &LosEstimate, b: &LosEstimate, t_b: f64, unc: &InitialUncertainty) -> Result<(TrackState, TrackState)> {
    if !(t_b > 0.0) {
        return Err(invalid("block duration must be positive"));
    }
    let rate_var = |s: f64| 2.0 * s * s / (t_b * t_b);
    let ul = diag_state(
        vec![b.tau, b.theta, (b.tau - a.tau) / t_b, angle_diff(b.theta, a.theta) / t_b],
        vec![unc.sigma_tau.powi(2), unc.sigma_theta.powi(2), rate_var(unc.sigma_tau), rate_var(unc.sigma_theta)],
        t_b,
        1,
    );
    let dl = diag_state(
        vec![b.phi, angle_diff(b.phi, a.phi) / t_b],
        vec![unc.sigma_phi.powi(2), rate_var(unc.sigma_phi)],
        t_b,
        1,
    );
    Ok((ul, dl))
}

/// States with accelerations from three consecutive estimates (second differences).
pub fn init_state_with_acceleration(
    a: &LosEstimate,
    b: &LosEstimate,
    c: &LosEstimate,
    t_b: f64,
    unc: &InitialUncertainty,
) -> Result<(TrackState, TrackState)> {
    if !(t_b > 0.0) {
        return Err(invalid("block duration must be positive"));
    }
    let t2 = t_b * t_b;
    let rate = |x0: f64, x1: f64| x1 - x0;
    let d_tau = (rate(b.tau, c.tau), rate(a.tau, b.tau));
    let d_th = (angle_diff(c.theta, b.theta), angle_diff(b.theta, a.theta));
    let d_ph = (angle_diff(c.phi, b.phi), angle_diff(b.phi, a.phi));
    let rv = |s: f64| 2.0 * s * s / t2;
    let av = |s: f64| 6.0 * s * s / (t2 * t2);
    let ul = diag_state(
        vec![c.tau, c.theta, d_tau.0 / t_b, d_th.0 / t_b, (d_tau.0 - d_tau.1) / t2, (d_th.0 - d_th.1) / t2],
        vec![
            unc.sigma_tau.powi(2),
            unc.sigma_theta.powi(2),
            rv(unc.sigma_tau),
            rv(unc.sigma_theta),
            av(unc.sigma_tau),
            av(unc.sigma_theta),
        ],
        t_b,
        2,
    );
    let dl = diag_state(
        vec![c.phi, d_ph.0 / t_b, (d_ph.0 - d_ph.1) / t2],
        vec![unc.sigma_phi.powi(2), rv(unc.sigma_phi), av(unc.sigma_phi)],
        t_b,
        2,
    );
    Ok((ul, dl))
}

/// Nonlinear LOS observation model.
pub trait MeasurementModel {
    /// Number of tracked parameters (leading state entries).
    fn n_params(&self) -> usize;

    /// Scale applied to each parameter inside the filter for conditioning.
    fn scales(&self) -> Vec<f64> {
        vec![1.0; self.n_params()]
    }

    /// Unit-gain prediction and its Jacobian (one column per parameter).
    fn signature(&self, params: &[f64]) -> Result<(CVector, CMatrix)>;

    /// Prediction and Jacobian for a given complex gain.
    fn predict(&self, params: &[f64], gain: Complex64) -> Result<(CVector, CMatrix)> {
        let (s, j) = self.signature(params)?;
        Ok((s * gain, j * gain))
    }
}

/// Uplink model over `[τ, θ]` for a fixed transmit angle `φ`.
#[derive(Debug, Clone)]
pub struct UplinkModel {
    pub beams: LinkBeams,
    pub pilot: CMatrix,
    pub ofdm: OfdmConfig,
    pub phi: f64,
}

impl MeasurementModel for UplinkModel {
    fn n_params(&self) -> usize {
        2
    }

    fn scales(&self) -> Vec<f64> {
        vec![1e9, 1.0]
    }

    fn signature(&self, p: &[f64]) -> Result<(CVector, CMatrix)> {
        let s = path_signature(&self.beams, &self.pilot, &self.ofdm, p[0], p[1], self.phi)?;
        Ok((s.value, CMatrix::from_columns(&[s.d_tau, s.d_rx_angle])))
    }
}

/// Downlink model over `[φ]` for fixed delay and transmit angle `θ`.
#[derive(Debug, Clone)]
pub struct DownlinkModel {
    pub beams: LinkBeams,
    pub pilot: CMatrix,
    pub ofdm: OfdmConfig,
    pub tau: f64,
    pub theta: f64,
}

impl MeasurementModel for DownlinkModel {
    fn n_params(&self) -> usize {
        1
    }

    fn signature(&self, p: &[f64]) -> Result<(CVector, CMatrix)> {
        let s = path_signature(&self.beams, &self.pilot, &self.ofdm, self.tau, p[0], self.theta)?;
        Ok((s.value, CMatrix::from_columns(&[s.d_rx_angle])))
    }
}

/// Stacks `[Re v; Im v]`.
pub fn stack_real(v: &CVector) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Stacks the columns of a complex Jacobian as `[Re J; Im J]`.
pub fn stack_real_matrix(j: &CMatrix) -> DMatrix<f64> {
    let n = j.nrows();
    DMatrix::from_fn(2 * n, j.ncols(), |i, k| if i < n { j[(i, k)].re } else { j[(i - n, k)].im })
}

/// Per-subcarrier complex noise covariance, repeated over `n_blocks` subcarriers.
#[derive(Debug, Clone)]
pub struct MeasurementNoise {
    pub block_cov: CMatrix,
    pub n_blocks: usize,
    chol: CMatrix,
}

impl MeasurementNoise {
    pub fn new(block_cov: CMatrix, n_blocks: usize) -> Result<Self> {
        let chol = block_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("measurement noise covariance is not positive definite".into()))?
            .l();
        Ok(Self { block_cov, n_blocks, chol })
    }

    pub fn dim(&self) -> usize {
        self.block_cov.nrows() * self.n_blocks
    }

    /// Whitening `L^{-1}` per block, scaled by √2 so the real-stacked result has unit variance.
    pub fn whiten(&self, v: &CMatrix) -> CMatrix {
        let m = self.block_cov.nrows();
        let mut out = v.clone();
        for b in 0..self.n_blocks {
            let blk = v.rows(b * m, m).into_owned();
            let w = self.chol.solve_lower_triangular(&blk).unwrap_or(blk);
            out.rows_mut(b * m, m).copy_from(&(w * Complex64::new(std::f64::consts::SQRT_2, 0.0)));
        }
        out
    }

    /// Real-stacked covariance `0.5·[[Re C, −Im C], [Im C, Re C]]`, block-diagonal over subcarriers.
    pub fn stacked_covariance(&self) -> DMatrix<f64> {
        let m = self.block_cov.nrows();
        let n = self.dim();
        let mut r = DMatrix::zeros(2 * n, 2 * n);
        for b in 0..self.n_blocks {
            for i in 0..m {
                for j in 0..m {
                    let c = self.block_cov[(i, j)] * 0.5;
                    let (ii, jj) = (b * m + i, b * m + j);
                    r[(ii, jj)] = c.re;
                    r[(n + ii, n + jj)] = c.re;
                    r[(ii, n + jj)] = -c.im;
                    r[(n + ii, jj)] = c.im;
                }
            }
        }
        r
    }
}

/// Diagnostics returned by [`ekf_update`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Normalized innovation squared.
    pub nis: f64,
    /// Degrees of freedom of the real-stacked innovation.
    pub dof: usize,
    pub gain: Complex64,
    /// Diagonal jitter was needed to invert the innovation system.
    pub regularized: bool,
}

/// Time update `x ← Φx`, `P ← ΦPΦ^T + Q`.
pub fn ekf_predict(state: &TrackState, transition: &DMatrix<f64>, q: &DMatrix<f64>) -> TrackState {
    let mut cov = transition * &state.cov * transition.transpose() + q;
    symmetrize(&mut cov);
    TrackState {
        psi: transition * &state.psi,
        cov,
        block_index: state.block_index + 1,
        block_duration: state.block_duration,
    }
}

/// Whitened least-squares estimate of the complex gain along `signature`.
pub fn estimate_gain(observation: &CVector, signature: &CVector, noise: &MeasurementNoise) -> Complex64 {
    let s = noise.whiten(&CMatrix::from_columns(std::slice::from_ref(signature)));
    let y = noise.whiten(&CMatrix::from_columns(std::slice::from_ref(observation)));
    let den = s.column(0).norm_squared();
    if den > 0.0 {
        s.column(0).dotc(&y.column(0)) / den
    } else {
        Complex64::new(0.0, 0.0)
    }
}

/// Measurement update with the gain re-estimated at the predicted parameters.
pub fn ekf_update<M: MeasurementModel>(
    predicted: &TrackState,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
) -> Result<(TrackState, StepInfo)> {
    ekf_update_iterated(predicted, observation, noise, model, 1)
}

struct Linearization {
    /// Whitened, real-stacked `y − ĝ·s(x)`.
    residual: DVector<f64>,
    /// Whitened, real-stacked Jacobian in scaled coordinates.
    h: DMatrix<f64>,
    gain: Complex64,
}

fn linearize<M: MeasurementModel>(
    psi: &DVector<f64>,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
    d: &DVector<f64>,
) -> Result<Linearization> {
    let np = model.n_params();
    let params: Vec<f64> = psi.iter().take(np).copied().collect();
    let (sig, jac) = model.signature(&params)?;
    if sig.len() != observation.len() {
        return Err(Error::DimensionMismatch("model output length differs from observation".into()));
    }
    let gain = estimate_gain(observation, &sig, noise);
    let pred = &sig * gain;
    let residual = stack_real(&noise.whiten(&CMatrix::from_columns(&[observation - &pred])).column(0).into_owned());
    // The gain is concentrated out, so only Jacobian directions orthogonal to the
    // whitened signature carry information.
    let sw = noise.whiten(&CMatrix::from_columns(&[pred])).column(0).into_owned();
    let mut jc = noise.whiten(&(jac * gain));
    let ss = sw.norm_squared();
    if ss > 0.0 {
        for k in 0..jc.ncols() {
            let coef = sw.dotc(&jc.column(k)) / ss;
            let col = jc.column(k) - &sw * coef;
            jc.set_column(k, &col);
        }
    }
    let jw = stack_real_matrix(&jc);
    let mut h = DMatrix::zeros(residual.len(), psi.len());
    for i in 0..np {
        h.set_column(i, &(jw.column(i) / d[i]));
    }
    Ok(Linearization { residual, h, gain })
}

/// Iterated measurement update (Gauss-Newton relinearization, `iterations ≥ 1`).
///
/// Uses the push-through form `K = P (I + HᵀH P)⁻¹ Hᵀ` on the whitened Jacobian
/// `H`, so only a state-sized system is inverted, followed by the Joseph
/// covariance update at the last linearization point.
pub fn ekf_update_iterated<M: MeasurementModel>(
    predicted: &TrackState,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
    iterations: usize,
) -> Result<(TrackState, StepInfo)> {
    update_from(predicted, &predicted.psi, observation, noise, model, iterations)
}

/// Grid used to seed the iterated update away from the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    /// Half-width of the scan in prior standard deviations.
    pub span_sigmas: f64,
    /// Points per parameter.
    pub points: usize,
    /// Coordinate-descent sweeps over the parameters.
    pub sweeps: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self { span_sigmas: 3.0, points: 49, sweeps: 2 }
    }
}

/// Gain-concentrated MAP cost `‖W(y − ĝ·s(x))‖² + Δxᵀ P⁻¹ Δx` over the parameter block.
fn map_cost<M: MeasurementModel>(
    params: &[f64],
    prior: &[f64],
    prior_info: &DMatrix<f64>,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
) -> Result<f64> {
    let (sig, _) = model.signature(params)?;
    let gain = estimate_gain(observation, &sig, noise);
    let r = noise.whiten(&CMatrix::from_columns(&[observation - &sig * gain]));
    let dx = DVector::from_fn(params.len(), |i, _| params[i] - prior[i]);
    Ok(r.column(0).norm_squared() + dx.dot(&(prior_info * &dx)))
}

/// Coordinate grid search of the MAP cost around the prediction.
///
/// Returns a full state whose non-parameter entries are shifted by their
/// conditional mean given the parameter shift.
pub fn map_search<M: MeasurementModel>(
    predicted: &TrackState,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
    grid: &SearchGrid,
) -> Result<DVector<f64>> {
    let np = model.n_params();
    let nx = predicted.dim();
    if np > nx {
        return Err(Error::DimensionMismatch("model has more parameters than the state".into()));
    }
    let ppp = predicted.cov.view((0, 0), (np, np)).into_owned();
    let info = ppp
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("prior parameter covariance not invertible".into()))?;
    let prior: Vec<f64> = predicted.psi.iter().take(np).copied().collect();
    let mut best = prior.clone();
    let mut best_cost = map_cost(&best, &prior, &info, observation, noise, model)?;
    let n = grid.points.max(2);
    for _ in 0..grid.sweeps.max(1) {
        for i in 0..np {
            let half = grid.span_sigmas * ppp[(i, i)].max(0.0).sqrt();
            if !(half > 0.0) {
                continue;
            }
            let mut trial = best.clone();
            for k in 0..n {
                trial[i] = prior[i] - half + 2.0 * half * k as f64 / (n - 1) as f64;
                let c = map_cost(&trial, &prior, &info, observation, noise, model)?;
                if c < best_cost {
                    best_cost = c;
                    best[i] = trial[i];
                }
            }
        }
    }
    let dp = DVector::from_fn(np, |i, _| best[i] - prior[i]);
    let mut out = predicted.psi.clone();
    if nx > np {
        let prp = predicted.cov.view((np, 0), (nx - np, np)).into_owned();
        let shift = prp * (&info * &dp);
        for i in 0..nx - np {
            out[np + i] += shift[i];
        }
    }
    out.rows_mut(0, np).copy_from(&DVector::from_vec(best));
    Ok(out)
}

/// Iterated update linearized first at the [`map_search`] optimum.
pub fn ekf_update_searched<M: MeasurementModel>(
    predicted: &TrackState,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
    iterations: usize,
    grid: &SearchGrid,
) -> Result<(TrackState, StepInfo)> {
    let start = map_search(predicted, observation, noise, model, grid)?;
    update_from(predicted, &start, observation, noise, model, iterations)
}

fn update_from<M: MeasurementModel>(
    predicted: &TrackState,
    start: &DVector<f64>,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
    iterations: usize,
) -> Result<(TrackState, StepInfo)> {
    let np = model.n_params();
    let nx = predicted.dim();
    if np > nx || !nx.is_multiple_of(np) {
        return Err(Error::DimensionMismatch("state dimension is not a multiple of the model parameters".into()));
    }
    if observation.len() != noise.dim() {
        return Err(Error::DimensionMismatch(format!(
            "observation length {} vs noise dimension {}",
            observation.len(),
            noise.dim()
        )));
    }
    let scales = model.scales();
    let mut d = DVector::from_element(nx, 1.0);
    for k in 0..(nx / np) {
        for (i, s) in scales.iter().enumerate() {
            d[k * np + i] = *s;
        }
    }
    let p_s = DMatrix::from_fn(nx, nx, |i, j| predicted.cov[(i, j)] * d[i] * d[j]);
    let eye = DMatrix::<f64>::identity(nx, nx);
    let x_pred = predicted.psi.component_mul(&d);

    let mut x_s = start.component_mul(&d);
    let mut regularized = false;
    let mut nis = 0.0;
    let mut dof = 0;
    let mut gain = Complex64::new(0.0, 0.0);
    let mut k_last = DMatrix::zeros(nx, 0);
    let mut h_last = DMatrix::zeros(0, nx);
    for it in 0..iterations.max(1) {
        let psi = x_s.component_div(&d);
        let lin = linearize(&psi, observation, noise, model, &d)?;
        let h = lin.h;
        let nu = &lin.residual + &h * (&x_s - &x_pred);
        let hth = h.transpose() * &h;
        let system = &eye + &hth * &p_s;
        let inv = match system.clone().try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
            _ => {
                regularized = true;
                let jitter = 1e-9 * (0..nx).map(|i| system[(i, i)].abs()).fold(1.0, f64::max);
                (system + &eye * jitter)
                    .try_inverse()
                    .ok_or_else(|| Error::Singular("innovation system not invertible after regularization".into()))?
            }
        };
        let pk = &p_s * &inv;
        let htnu = h.transpose() * &nu;
        if it == 0 {
            // νᵀS⁻¹ν = νᵀν − (Hᵀν)ᵀ P (I + HᵀH P)⁻¹ (Hᵀν)
            nis = nu.norm_squared() - htnu.dot(&(&pk * &htnu));
            dof = nu.len();
        }
        x_s = &x_pred + &pk * &htnu;
        gain = lin.gain;
        k_last = &pk * h.transpose();
        h_last = h;
    }
    let ikh = &eye - &k_last * &h_last;
    let mut cov_s = &ikh * &p_s * ikh.transpose() + &k_last * k_last.transpose();
    symmetrize(&mut cov_s);
    let psi = x_s.component_div(&d);
    let cov = DMatrix::from_fn(nx, nx, |i, j| cov_s[(i, j)] / (d[i] * d[j]));
    Ok((
        TrackState { psi, cov, block_index: predicted.block_index, block_duration: predicted.block_duration },
        StepInfo { nis, dof, gain, regularized },
    ))
}

/// Predict followed by update.
pub fn ekf_step<M: MeasurementModel>(
    state: &TrackState,
    transition: &DMatrix<f64>,
    q: &DMatrix<f64>,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
) -> Result<(TrackState, StepInfo)> {
    ekf_step_iterated(state, transition, q, observation, noise, model, 1)
}

/// Predict followed by an iterated update.
pub fn ekf_step_iterated<M: MeasurementModel>(
    state: &TrackState,
    transition: &DMatrix<f64>,
    q: &DMatrix<f64>,
    observation: &CVector,
    noise: &MeasurementNoise,
    model: &M,
    iterations: usize,
) -> Result<(TrackState, StepInfo)> {
    let predicted = ekf_predict(state, transition, q);
    ekf_update_iterated(&predicted, observation, noise, model, iterations)
}
