//! Training sensing matrices and synthesis of noisy training/tracking observations.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{chi_vector, chi_vector_derivative, lens_matrix, ArrayConfig, ArrayPair, Link, OfdmConfig};
use crate::error::{invalid, Error, Result};
use crate::scene::PathParams;
use crate::util::{complex_gaussian, energy, seeded_rng, unit_phasor, CMatrix, CVector};

/// Parameters of the sequential training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub g_beams: usize,
    pub v_elements: usize,
    pub p_fa: f64,
    pub noise_psd: f64,
    /// Overrides `noise_psd` through [`noise_psd_for_snr`] when set.
    pub snr_db: Option<f64>,
    pub rng_seed: u64,
    /// Use `x_BB = 1` baseband symbols instead of random unit-circle symbols.
    pub unit_baseband: bool,
    /// Largest expected number of NLOS paths, used for the G sanity check.
    pub k_max: usize,
    /// Subcarriers used for uplink angle detection (the first `n`); `None` uses all.
    pub uplink_subcarriers: Option<usize>,
    /// Cap on extraction iterations per training run.
    pub max_iterations: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            g_beams: 16,
            v_elements: 3,
            p_fa: 1e-3,
            noise_psd: 1.0,
            snr_db: None,
            rng_seed: 0,
            unit_baseband: true,
            k_max: 4,
            uplink_subcarriers: None,
            max_iterations: 5,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g_beams == 0 || self.v_elements == 0 {
            return Err(invalid("G and V must be positive"));
        }
        if !(self.p_fa > 0.0 && self.p_fa < 1.0) {
            return Err(invalid("p_fa must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be positive"));
        }
        Ok(())
    }

    /// Recommended G for `n_antennas`: `ceil((K+1)·ln(N/(K+1)))`.
    pub fn recommended_g(&self, n_antennas: usize) -> usize {
        let k1 = (self.k_max + 1) as f64;
        ((k1 * (n_antennas as f64 / k1).ln()).ceil().max(1.0)) as usize
    }

    /// Logs a warning when G is below the recommended minimum. Returns whether it is sufficient.
    pub fn check_g(&self, n_antennas: usize) -> bool {
        let rec = self.recommended_g(n_antennas);
        if self.g_beams < rec {
            log::warn!("G = {} is below the recommended {} for N = {}", self.g_beams, rec, n_antennas);
            false
        } else {
            true
        }
    }
}

/// Training measurement matrices `Ω[n] = F̄·diag(conj(x[n]))`, stored factorized.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingMatrix {
    /// `N × G` selector with ±1 entries.
    pub selector: DMatrix<f64>,
    /// Per-subcarrier baseband symbols, each of length `G`.
    pub symbols: Vec<CVector>,
}

impl SensingMatrix {
    pub fn n_antennas(&self) -> usize {
        self.selector.nrows()
    }

    pub fn n_beams(&self) -> usize {
        self.selector.ncols()
    }

    pub fn n_subcarriers(&self) -> usize {
        self.symbols.len()
    }

    /// `Ω[n]`, shape `N × G`.
    pub fn omega(&self, n: usize) -> CMatrix {
        let x = &self.symbols[n];
        CMatrix::from_fn(self.n_antennas(), self.n_beams(), |m, g| x[g].conj() * self.selector[(m, g)])
    }

    /// `Ω^H[n]`, shape `G × N`.
    pub fn omega_h(&self, n: usize) -> CMatrix {
        let x = &self.symbols[n];
        CMatrix::from_fn(self.n_beams(), self.n_antennas(), |g, m| x[g] * self.selector[(m, g)])
    }

    /// `Ω^H[n]·h`.
    pub fn apply_h(&self, n: usize, h: &CVector) -> CVector {
        let x = &self.symbols[n];
        CVector::from_fn(self.n_beams(), |g, _| {
            let s: Complex64 = (0..self.n_antennas()).map(|m| h[m] * self.selector[(m, g)]).sum();
            s * x[g]
        })
    }

    /// `Ω[n]·r`: correlation of a residual with every atom.
    pub fn correlate(&self, n: usize, r: &CVector) -> CVector {
        let x = &self.symbols[n];
        let xr: Vec<Complex64> = (0..self.n_beams()).map(|g| x[g].conj() * r[g]).collect();
        CVector::from_fn(self.n_antennas(), |m, _| (0..self.n_beams()).map(|g| xr[g] * self.selector[(m, g)]).sum())
    }

    /// Norm of atom `m` (column `m` of `Ω^H[n]`).
    pub fn atom_norm(&self, n: usize, m: usize) -> f64 {
        let x = &self.symbols[n];
        (0..self.n_beams())
            .map(|g| (x[g] * self.selector[(m, g)]).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Squared norm of selector column `g`.
    pub fn selector_energy(&self, g: usize) -> f64 {
        self.selector.column(g).norm_squared()
    }

    /// Per-entry training noise variance `N₀·N·‖f̄_g‖²` for each sequential slot.
    pub fn noise_variances(&self, noise_psd: f64) -> Vec<f64> {
        let n = self.n_antennas() as f64;
        (0..self.n_beams()).map(|g| noise_psd * n * self.selector_energy(g)).collect()
    }

    /// Mean per-entry noise variance across slots.
    pub fn mean_noise_variance(&self, noise_psd: f64) -> f64 {
        let v = self.noise_variances(noise_psd);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Largest normalized inner product between distinct rows of `Ω[n]` (atoms).
    pub fn coherence(&self, n: usize) -> f64 {
        let om = self.omega(n);
        let mut worst: f64 = 0.0;
        for i in 0..om.nrows() {
            for j in (i + 1)..om.nrows() {
                let ri = om.row(i);
                let rj = om.row(j);
                let ip: Complex64 = ri.iter().zip(rj.iter()).map(|(a, b)| a.conj() * b).sum();
                worst = worst.max(ip.norm() / (ri.norm() * rj.norm()));
            }
        }
        worst
    }
}

/// Draws a Bernoulli ±1 selector and the per-subcarrier baseband symbols.
pub fn make_sensing_matrix(n_antennas: usize, config: &TrainingConfig, ofdm: &OfdmConfig) -> Result<SensingMatrix> {
    config.validate()?;
    if n_antennas == 0 {
        return Err(invalid("sensing matrix needs at least one antenna"));
    }
    let mut rng = seeded_rng(config.rng_seed);
    let selector = DMatrix::from_fn(n_antennas, config.g_beams, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let symbols = (0..ofdm.n_subcarriers)
        .map(|_| {
            CVector::from_fn(config.g_beams, |_, _| {
                if config.unit_baseband {
                    Complex64::new(1.0, 0.0)
                } else {
                    unit_phasor(&mut rng)
                }
            })
        })
        .collect();
    Ok(SensingMatrix { selector, symbols })
}

fn check_training_shapes(h_sparse: &[CVector], sensing: &SensingMatrix) -> Result<()> {
    if h_sparse.len() != sensing.n_subcarriers() {
        return Err(Error::DimensionMismatch(format!(
            "{} channel vectors for {} subcarriers",
            h_sparse.len(),
            sensing.n_subcarriers()
        )));
    }
    if let Some(h) = h_sparse.iter().find(|h| h.len() != sensing.n_antennas()) {
        return Err(Error::DimensionMismatch(format!(
            "channel vector length {} for {} antennas",
            h.len(),
            sensing.n_antennas()
        )));
    }
    Ok(())
}

/// Noiseless training observation `Ω^H[n]·h[n]` for every subcarrier.
pub fn training_signal(h_sparse: &[CVector], sensing: &SensingMatrix) -> Result<Vec<CVector>> {
    check_training_shapes(h_sparse, sensing)?;
    Ok(h_sparse.iter().enumerate().map(|(n, h)| sensing.apply_h(n, h)).collect())
}

/// Noisy training observation with independent per-slot noise of variance `N₀·N·‖f̄_g‖²`.
pub fn synthesize_training_rx<R: Rng + ?Sized>(
    h_sparse: &[CVector],
    sensing: &SensingMatrix,
    noise_psd: f64,
    rng: &mut R,
) -> Result<Vec<CVector>> {
    let mut y = training_signal(h_sparse, sensing)?;
    let var = sensing.noise_variances(noise_psd);
    if noise_psd > 0.0 {
        for yn in y.iter_mut() {
            for (g, z) in yn.iter_mut().enumerate() {
                *z += complex_gaussian(rng, var[g]);
            }
        }
    }
    Ok(y)
}

/// Noise PSD that yields the requested training SNR for the given channel.
pub fn noise_psd_for_snr(snr_db: f64, sensing: &SensingMatrix, h_sparse: &[CVector]) -> Result<f64> {
    let signal: f64 = training_signal(h_sparse, sensing)?.iter().map(energy).sum();
    if !(signal > 0.0) {
        return Err(invalid("signal energy must be positive to calibrate noise"));
    }
    let per_psd: f64 = sensing.noise_variances(1.0).iter().sum::<f64>() * sensing.n_subcarriers() as f64;
    Ok(signal / (10f64.powf(snr_db / 10.0) * per_psd))
}

/// Draws combined noise `W^H n` for white antenna noise, i.e. `CN(0, N₀·W^H W)`.
pub fn combined_noise<R: Rng + ?Sized>(gram_chol: &CMatrix, noise_psd: f64, rng: &mut R) -> CVector {
    let m = gram_chol.nrows();
    let w = CVector::from_fn(m, |_, _| complex_gaussian(rng, noise_psd));
    gram_chol * w
}

/// Beamformers of one tracking link, translated into beamspace.
#[derive(Debug, Clone)]
pub struct LinkBeams {
    pub direction: Link,
    pub rx_array: ArrayConfig,
    pub tx_array: ArrayConfig,
    /// `U_tx^H V / N_tx`, shape `N_tx × M_tx`.
    pub tx_beamspace: CMatrix,
    /// `U_rx^H W / N_rx`, shape `N_rx × M_rx`.
    pub rx_beamspace: CMatrix,
    /// `W^H W`, the per-subcarrier receive noise covariance per unit `N₀`.
    pub rx_gram: CMatrix,
}

impl LinkBeams {
    /// Builds from antenna-domain transmit precoder `tx` and receive combiner `rx`.
    pub fn from_antenna(direction: Link, arrays: &ArrayPair, tx: &CMatrix, rx: &CMatrix) -> Result<Self> {
        let (rx_array, tx_array) = match direction {
            Link::Uplink => (arrays.bs, arrays.ms),
            Link::Downlink => (arrays.ms, arrays.bs),
        };
        if tx.nrows() != tx_array.n_elements || rx.nrows() != rx_array.n_elements {
            return Err(Error::DimensionMismatch("beamformer rows must match array sizes".into()));
        }
        let to_beam = |a: &ArrayConfig, w: &CMatrix| lens_matrix(a).adjoint() * w / Complex64::new(a.n_elements as f64, 0.0);
        Ok(Self {
            direction,
            rx_array,
            tx_array,
            tx_beamspace: to_beam(&tx_array, tx),
            rx_beamspace: to_beam(&rx_array, rx),
            rx_gram: rx.adjoint() * rx,
        })
    }

    pub fn m_rx(&self) -> usize {
        self.rx_beamspace.ncols()
    }

    pub fn m_tx(&self) -> usize {
        self.tx_beamspace.ncols()
    }
}

/// All-ones pilot block `X₀` of shape `N × M_tx`.
pub fn default_pilot(ofdm: &OfdmConfig, m_tx: usize) -> CMatrix {
    CMatrix::from_element(ofdm.n_subcarriers, m_tx, Complex64::new(1.0, 0.0))
}

fn real_to_complex(v: &nalgebra::DVector<f64>) -> CVector {
    v.map(|x| Complex64::new(x, 0.0))
}

/// Unit-gain response of one path together with its derivatives.
#[derive(Debug, Clone)]
pub struct Signature {
    pub value: CVector,
    pub d_tau: CVector,
    pub d_rx_angle: CVector,
    pub d_tx_angle: CVector,
}

/// Unit-gain noiseless tracking response `(X₀·F_tx^T χ_tx ⊙ a(τ)) ⊗ F_rx^H χ_rx` and its derivatives.
///
/// Output index is `n·M_rx + j` for subcarrier `n` and receive beam `j`.
pub fn path_signature(
    beams: &LinkBeams,
    pilot: &CMatrix,
    ofdm: &OfdmConfig,
    tau: f64,
    rx_angle: f64,
    tx_angle: f64,
) -> Result<Signature> {
    let n_sub = ofdm.n_subcarriers;
    if pilot.nrows() != n_sub || pilot.ncols() != beams.m_tx() {
        return Err(Error::DimensionMismatch(format!(
            "pilot block {}×{} for N = {} and M_tx = {}",
            pilot.nrows(),
            pilot.ncols(),
            n_sub,
            beams.m_tx()
        )));
    }
    let chi_tx = real_to_complex(&chi_vector(&beams.tx_array, tx_angle));
    let dchi_tx = real_to_complex(&chi_vector_derivative(&beams.tx_array, tx_angle));
    let chi_rx = real_to_complex(&chi_vector(&beams.rx_array, rx_angle));
    let dchi_rx = real_to_complex(&chi_vector_derivative(&beams.rx_array, rx_angle));
    let tx_part = pilot * (beams.tx_beamspace.transpose() * chi_tx);
    let dtx_part = pilot * (beams.tx_beamspace.transpose() * dchi_tx);
    let rx_part = beams.rx_beamspace.adjoint() * chi_rx;
    let drx_part = beams.rx_beamspace.adjoint() * dchi_rx;
    let m = beams.m_rx();
    let len = n_sub * m;
    let mut value = CVector::zeros(len);
    let mut d_tau = CVector::zeros(len);
    let mut d_rx_angle = CVector::zeros(len);
    let mut d_tx_angle = CVector::zeros(len);
    for n in 0..n_sub {
        let a = ofdm.delay_phasor(n, tau);
        let da = ofdm.delay_phasor_dtau(n, tau);
        for j in 0..m {
            let k = n * m + j;
            value[k] = tx_part[n] * a * rx_part[j];
            d_tau[k] = tx_part[n] * da * rx_part[j];
            d_rx_angle[k] = tx_part[n] * a * drx_part[j];
            d_tx_angle[k] = dtx_part[n] * a * rx_part[j];
        }
    }
    Ok(Signature { value, d_tau, d_rx_angle, d_tx_angle })
}

/// Noiseless tracking observation summed over all paths.
pub fn tracking_signal(paths: &[PathParams], beams: &LinkBeams, pilot: &CMatrix, ofdm: &OfdmConfig) -> Result<CVector> {
    let mut y = CVector::zeros(ofdm.n_subcarriers * beams.m_rx());
    for p in paths {
        let (rx, tx) = match beams.direction {
            Link::Uplink => (p.theta, p.phi),
            Link::Downlink => (p.phi, p.theta),
        };
        y += path_signature(beams, pilot, ofdm, p.tau, rx, tx)?.value * p.gain;
    }
    Ok(y)
}

/// Lower Cholesky factor of the receive Gram matrix, with a small ridge if it is rank deficient.
pub fn gram_cholesky(gram: &CMatrix) -> CMatrix {
    if let Some(ch) = gram.clone().cholesky() {
        return ch.l();
    }
    let scale = (0..gram.nrows()).map(|i| gram[(i, i)].re).fold(0.0, f64::max).max(1e-300);
    let ridge = gram + CMatrix::identity(gram.nrows(), gram.ncols()) * Complex64::new(1e-10 * scale, 0.0);
    ridge.cholesky().map(|c| c.l()).unwrap_or_else(|| CMatrix::identity(gram.nrows(), gram.ncols()))
}

/// Noisy tracking observation: all paths plus combined noise `CN(0, N₀·W^H W)` per subcarrier.
pub fn synthesize_tracking_rx<R: Rng + ?Sized>(
    paths: &[PathParams],
    beams: &LinkBeams,
    pilot: &CMatrix,
    ofdm: &OfdmConfig,
    noise_psd: f64,
    rng: &mut R,
) -> Result<CVector> {
    let mut y = tracking_signal(paths, beams, pilot, ofdm)?;
    if noise_psd > 0.0 {
        let l = gram_cholesky(&beams.rx_gram);
        let m = beams.m_rx();
        for n in 0..ofdm.n_subcarriers {
            let w = combined_noise(&l, noise_psd, rng);
            for j in 0..m {
                y[n * m + j] += w[j];
            }
        }
    }
    Ok(y)
}

/// Unit-norm all-ones splitter precoder.
pub fn splitter(n: usize) -> CVector {
    CVector::from_element(n, Complex64::new(1.0 / (n as f64).sqrt(), 0.0))
}

/// `exp(j2πx)`.
pub fn phasor(x: f64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * x)
}
