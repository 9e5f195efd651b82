//! Array responses, DFT lens transforms and the wideband beamspace channel.
//!
//! Antenna and beam indices follow the symmetric convention
//! `m ∈ {−(N−1)/2, …, (N−1)/2}` (half-integers for even `N`). Storage is 0-based;
//! [`symmetric_index`] and [`storage_index`] convert between the two.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scene::PathParams;
use crate::util::{CMatrix, CVector};
use crate::SPEED_OF_LIGHT;

/// Uniform linear array description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub n_elements: usize,
    pub spacing: f64,
    pub wavelength: f64,
}

impl ArrayConfig {
    pub fn new(n_elements: usize, spacing: f64, wavelength: f64) -> Result<Self> {
        if n_elements < 1 || !(spacing > 0.0) || !(wavelength > 0.0) {
            return Err(invalid("array needs n_elements ≥ 1 and positive spacing/wavelength"));
        }
        Ok(Self { n_elements, spacing, wavelength })
    }

    /// Half-wavelength array.
    pub fn half_wavelength(n_elements: usize, wavelength: f64) -> Self {
        Self { n_elements, spacing: wavelength / 2.0, wavelength }
    }

    pub fn spacing_ratio(&self) -> f64 {
        self.spacing / self.wavelength
    }

    /// Normalized spatial frequency `(d/λ)·sin(angle)`.
    pub fn spatial_freq(&self, angle: f64) -> f64 {
        self.spacing_ratio() * angle.sin()
    }
}

/// OFDM numerology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfdmConfig {
    pub n_subcarriers: usize,
    pub bandwidth: f64,
    pub cp_length: usize,
    pub carrier_freq: f64,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self { n_subcarriers: 40, bandwidth: 200e6, cp_length: 20, carrier_freq: 60e9 }
    }
}

impl OfdmConfig {
    pub fn sample_period(&self) -> f64 {
        1.0 / self.bandwidth
    }

    pub fn cp_duration(&self) -> f64 {
        self.cp_length as f64 * self.sample_period()
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    /// Subcarrier delay phasor `exp(−j2πnτ/(N·T_s))`.
    pub fn delay_phasor(&self, n: usize, tau: f64) -> Complex64 {
        let arg = -2.0 * PI * n as f64 * tau / (self.n_subcarriers as f64 * self.sample_period());
        Complex64::from_polar(1.0, arg)
    }

    /// Derivative of [`Self::delay_phasor`] with respect to `tau`.
    pub fn delay_phasor_dtau(&self, n: usize, tau: f64) -> Complex64 {
        let k = -2.0 * PI * n as f64 / (self.n_subcarriers as f64 * self.sample_period());
        Complex64::new(0.0, k) * self.delay_phasor(n, tau)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subcarriers == 0 || !(self.bandwidth > 0.0) || !(self.carrier_freq > 0.0) {
            return Err(invalid("OFDM config needs N ≥ 1 and positive bandwidth/carrier"));
        }
        Ok(())
    }
}

/// Per-path subcarrier gain `h̃·exp(−j2πnτ/(N·T_s))`.
pub fn gamma(path: &PathParams, n: usize, ofdm: &OfdmConfig) -> Complex64 {
    path.gain * ofdm.delay_phasor(n, path.tau)
}

/// Symmetric index for storage position `i` of an `n`-element axis.
pub fn symmetric_index(i: usize, n: usize) -> f64 {
    i as f64 - (n as f64 - 1.0) / 2.0
}

/// Storage position for a symmetric index, if it lies on the axis.
pub fn storage_index(m: f64, n: usize) -> Option<usize> {
    let i = m + (n as f64 - 1.0) / 2.0;
    let r = i.round();
    if (i - r).abs() < 1e-9 && r >= 0.0 && r < n as f64 {
        Some(r as usize)
    } else {
        None
    }
}

/// Unit-norm steering vector.
pub fn steering_vector(array: &ArrayConfig, angle: f64) -> CVector {
    let n = array.n_elements;
    let u = array.spatial_freq(angle);
    let s = 1.0 / (n as f64).sqrt();
    DVector::from_fn(n, |i, _| Complex64::from_polar(s, 2.0 * PI * symmetric_index(i, n) * u))
}

/// Derivative of the steering vector with respect to the angle.
pub fn steering_vector_derivative(array: &ArrayConfig, angle: f64) -> CVector {
    let n = array.n_elements;
    let du = array.spacing_ratio() * angle.cos();
    let a = steering_vector(array, angle);
    DVector::from_fn(n, |i, _| a[i] * Complex64::new(0.0, 2.0 * PI * symmetric_index(i, n) * du))
}

/// DFT lens matrix with `U^H U = N·I`.
pub fn lens_matrix(array: &ArrayConfig) -> CMatrix {
    let n = array.n_elements;
    DMatrix::from_fn(n, n, |i, p| {
        let arg = 2.0 * PI * symmetric_index(i, n) * symmetric_index(p, n) / n as f64;
        Complex64::from_polar(1.0, arg)
    })
}

/// Dirichlet-type kernel `sin(πNx)/(√N·sin(πx))`.
pub fn chi_kernel(n: usize, x: f64) -> f64 {
    let nf = n as f64;
    let s = (PI * x).sin();
    if s.abs() < 1e-8 {
        let k = x.round();
        let eps = x - k;
        let sign = if ((k as i64) * (n as i64 - 1)).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        sign * nf.sqrt() * (1.0 - PI * PI * (nf * nf - 1.0) * eps * eps / 6.0)
    } else {
        (PI * nf * x).sin() / (nf.sqrt() * s)
    }
}

/// Derivative of [`chi_kernel`] with respect to `x`, from the cosine-sum form.
pub fn chi_kernel_derivative(n: usize, x: f64) -> f64 {
    let sum: f64 = (0..n)
        .map(|i| {
            let m = symmetric_index(i, n);
            -2.0 * PI * m * (2.0 * PI * m * x).sin()
        })
        .sum();
    sum / (n as f64).sqrt()
}

/// Beamspace response `U^H a(angle)`: entries `χ((d/λ)sin(angle) − p/N)`.
pub fn chi_vector(array: &ArrayConfig, angle: f64) -> DVector<f64> {
    let n = array.n_elements;
    let u = array.spatial_freq(angle);
    DVector::from_fn(n, |p, _| chi_kernel(n, u - symmetric_index(p, n) / n as f64))
}

/// Derivative of [`chi_vector`] with respect to the angle.
pub fn chi_vector_derivative(array: &ArrayConfig, angle: f64) -> DVector<f64> {
    let n = array.n_elements;
    let u = array.spatial_freq(angle);
    let du = array.spacing_ratio() * angle.cos();
    DVector::from_fn(n, |p, _| du * chi_kernel_derivative(n, u - symmetric_index(p, n) / n as f64))
}

/// Transmission direction of a channel realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    /// BS transmits, MS receives: `N_MS × N_BS` matrices.
    Downlink,
    /// MS transmits, BS receives: `N_BS × N_MS` matrices.
    Uplink,
}

/// Array pair of a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayPair {
    pub bs: ArrayConfig,
    pub ms: ArrayConfig,
}

/// Per-subcarrier beamspace channel matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamspaceChannel {
    pub link: Link,
    pub matrices: Vec<CMatrix>,
}

impl BeamspaceChannel {
    pub fn n_subcarriers(&self) -> usize {
        self.matrices.len()
    }
}

/// Antenna-domain channel `H[n] = Σ γ_n a_rx a_tx^H`.
pub fn antenna_channel(paths: &[PathParams], arrays: &ArrayPair, ofdm: &OfdmConfig, link: Link, n: usize) -> CMatrix {
    let (rx, tx) = match link {
        Link::Downlink => (&arrays.ms, &arrays.bs),
        Link::Uplink => (&arrays.bs, &arrays.ms),
    };
    let mut h = CMatrix::zeros(rx.n_elements, tx.n_elements);
    for path in paths {
        let (rx_angle, tx_angle) = match link {
            Link::Downlink => (path.phi, path.theta),
            Link::Uplink => (path.theta, path.phi),
        };
        let a_rx = steering_vector(rx, rx_angle);
        let a_tx = steering_vector(tx, tx_angle);
        h += (a_rx * a_tx.adjoint()) * gamma(path, n, ofdm);
    }
    h
}

/// Beamspace channel through explicit lens transforms `U_rx^H H[n] U_tx`.
pub fn beamspace_channel_direct(paths: &[PathParams], arrays: &ArrayPair, ofdm: &OfdmConfig, link: Link) -> BeamspaceChannel {
    let (rx, tx) = match link {
        Link::Downlink => (&arrays.ms, &arrays.bs),
        Link::Uplink => (&arrays.bs, &arrays.ms),
    };
    let u_rx_h = lens_matrix(rx).adjoint();
    let u_tx = lens_matrix(tx);
    let matrices = (0..ofdm.n_subcarriers)
        .map(|n| &u_rx_h * antenna_channel(paths, arrays, ofdm, link, n) * &u_tx)
        .collect();
    BeamspaceChannel { link, matrices }
}

/// Beamspace channel from the closed-form `Σ γ_n χ_rx χ_tx^T` expression.
pub fn beamspace_channel_closed(paths: &[PathParams], arrays: &ArrayPair, ofdm: &OfdmConfig, link: Link) -> BeamspaceChannel {
    let (rx, tx) = match link {
        Link::Downlink => (&arrays.ms, &arrays.bs),
        Link::Uplink => (&arrays.bs, &arrays.ms),
    };
    let outer: Vec<DMatrix<f64>> = paths
        .iter()
        .map(|p| {
            let (ra, ta) = match link {
                Link::Downlink => (p.phi, p.theta),
                Link::Uplink => (p.theta, p.phi),
            };
            chi_vector(rx, ra) * chi_vector(tx, ta).transpose()
        })
        .collect();
    let matrices = (0..ofdm.n_subcarriers)
        .map(|n| {
            let mut m = CMatrix::zeros(rx.n_elements, tx.n_elements);
            for (p, o) in paths.iter().zip(&outer) {
                let g = gamma(p, n, ofdm);
                m.zip_apply(o, |z, r| *z += g * r);
            }
            m
        })
        .collect();
    BeamspaceChannel { link, matrices }
}

/// Which side's beamspace the sparse vector lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Ms,
    Bs,
}

/// Per-subcarrier sparse beamspace vector `√N_other · Σ γ_n χ_side`.
pub fn sparse_beamspace_vector(paths: &[PathParams], arrays: &ArrayPair, ofdm: &OfdmConfig, side: Side) -> Vec<CVector> {
    let (own, other) = match side {
        Side::Ms => (&arrays.ms, &arrays.bs),
        Side::Bs => (&arrays.bs, &arrays.ms),
    };
    let scale = (other.n_elements as f64).sqrt();
    let chis: Vec<DVector<f64>> = paths
        .iter()
        .map(|p| chi_vector(own, if side == Side::Ms { p.phi } else { p.theta }))
        .collect();
    (0..ofdm.n_subcarriers)
        .map(|n| {
            let mut v = CVector::zeros(own.n_elements);
            for (p, c) in paths.iter().zip(&chis) {
                let g = gamma(p, n, ofdm) * scale;
                v.zip_apply(c, |z, r| *z += g * r);
            }
            v
        })
        .collect()
}

/// Storage index of the strongest beam for a given angle.
pub fn dominant_beam(array: &ArrayConfig, angle: f64) -> usize {
    chi_vector(array, angle).iamax()
}
