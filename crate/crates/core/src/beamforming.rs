//! Tracking beam banks with 3 dB crossover spacing, the beam-count rule and
//! hybrid analog/digital decomposition over lens columns.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::channel::{steering_vector, ArrayConfig};
use crate::error::{invalid, Error, Result};
use crate::util::{frobenius_sq, least_squares, CMatrix, CVector};

/// Analog and baseband parts of a beamformer.
#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    pub rf: CMatrix,
    pub bb: CMatrix,
}

impl Beamformer {
    pub fn composed(&self) -> CMatrix {
        &self.rf * &self.bb
    }

    pub fn n_beams(&self) -> usize {
        self.bb.ncols()
    }

    /// Rescales the baseband so that `‖rf·bb‖_F = 1`.
    pub fn normalize(&mut self) {
        let p = frobenius_sq(&self.composed()).sqrt();
        if p > 0.0 {
            self.bb /= Complex64::new(p, 0.0);
        }
    }
}

/// Normalized single-beam power pattern `|a(0)^H a(u)|²` at sin-space offset `u`.
fn pattern(array: &ArrayConfig, du: f64) -> f64 {
    let n = array.n_elements as f64;
    let x = array.spacing_ratio() * du;
    let s = (PI * x).sin();
    if s.abs() < 1e-12 {
        1.0
    } else {
        ((PI * n * x).sin() / (n * s)).powi(2)
    }
}

/// Sin-space offset at which a beam falls to half power.
pub fn half_power_offset(array: &ArrayConfig) -> f64 {
    let n = array.n_elements as f64;
    let mut lo = 0.0;
    let mut hi = 1.0 / (n * array.spacing_ratio());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pattern(array, mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Broadside beam spacing (radians) at which adjacent beams cross at −3 dB.
pub fn delta_phi_3db(array: &ArrayConfig) -> f64 {
    2.0 * half_power_offset(array).asin()
}

/// Minimum beam count `ceil(σ·N/2)` covering an angular spread `σ` (radians).
pub fn min_beam_count(sigma_max: f64, n_elements: usize) -> Result<usize> {
    if !(sigma_max > 0.0) {
        return Err(invalid("angular spread must be positive"));
    }
    let m = (sigma_max * n_elements as f64 / 2.0).ceil().max(1.0) as usize;
    if m > n_elements {
        return Err(invalid(format!("{m} beams exceed the {n_elements}-element array")));
    }
    Ok(m)
}

/// Beam-center offsets in units of the crossover spacing, symmetric about zero.
pub fn beam_offsets(m_beams: usize) -> Vec<f64> {
    (0..m_beams).map(|i| i as f64 - (m_beams as f64 - 1.0) / 2.0).collect()
}

/// Beam-center angles around `center`, spaced uniformly in sin-space by twice the
/// half-power offset so that neighbours cross at −3 dB at any steering angle.
pub fn beam_centers(center: f64, m_beams: usize, array: &ArrayConfig) -> Vec<f64> {
    let du = 2.0 * half_power_offset(array);
    let s0 = center.sin();
    let flip = center.cos() < 0.0;
    beam_offsets(m_beams)
        .into_iter()
        .map(|k| {
            let a = (s0 + k * du).clamp(-1.0, 1.0).asin();
            if flip {
                PI - a
            } else {
                a
            }
        })
        .collect()
}

/// Bank of `m_beams` steering vectors around `center`, normalized to unit Frobenius norm.
pub fn heuristic_beamformer(center: f64, m_beams: usize, array: &ArrayConfig) -> Result<Beamformer> {
    if m_beams == 0 {
        return Err(invalid("at least one beam is required"));
    }
    let cols: Vec<CVector> = beam_centers(center, m_beams, array).iter().map(|&a| steering_vector(array, a)).collect();
    let rf = CMatrix::from_columns(&cols);
    let mut bf = Beamformer { rf, bb: CMatrix::identity(m_beams, m_beams) };
    bf.normalize();
    Ok(bf)
}

/// Largest per-angle beam gain of a bank relative to a single beam's peak.
pub fn coverage_gain(bf: &Beamformer, array: &ArrayConfig, angle: f64) -> f64 {
    let a = steering_vector(array, angle);
    let composed = bf.composed();
    (0..composed.ncols())
        .map(|j| {
            let c = composed.column(j);
            c.dotc(&a).norm_sqr() / c.norm_squared().max(1e-300)
        })
        .fold(0.0, f64::max)
}

/// Outcome of a hybrid decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridDesign {
    pub beamformer: Beamformer,
    /// Lens columns picked by the greedy search.
    pub selected: Vec<usize>,
    /// `‖F_target − F_RF·F_BB‖_F` before the power normalization.
    pub residual: f64,
}

fn one_bit_column(u: CVector, phases: usize) -> CVector {
    let n = u.len() as f64;
    let mut best = (f64::NEG_INFINITY, CVector::from_element(u.len(), Complex64::new(1.0, 0.0)));
    for k in 0..phases {
        let rot = Complex64::from_polar(1.0, PI * k as f64 / phases as f64);
        let b = u.map(|z| Complex64::new(if (z * rot).re >= 0.0 { 1.0 } else { -1.0 }, 0.0));
        let score = b.dotc(&u).norm() / n.sqrt();
        if score > best.0 {
            best = (score, b);
        }
    }
    best.1
}

/// Greedy decomposition of `target` onto `m_rf` columns of `lens`, with least-squares baseband.
///
/// With `one_bit`, each picked column is replaced by the ±1 vector closest to it after
/// the best of 64 common phase rotations, and the baseband is re-solved.
pub fn hybrid_decompose(target: &CMatrix, lens: &CMatrix, m_rf: usize, one_bit: bool) -> Result<HybridDesign> {
    if m_rf == 0 {
        return Err(invalid("at least one RF chain is required"));
    }
    if m_rf > lens.ncols() {
        return Err(invalid("more RF chains than lens columns"));
    }
    if target.nrows() != lens.nrows() {
        return Err(Error::DimensionMismatch("target and lens row counts differ".into()));
    }
    let col_norms: Vec<f64> = (0..lens.ncols()).map(|k| lens.column(k).norm().max(1e-300)).collect();
    let mut selected: Vec<usize> = Vec::with_capacity(m_rf);
    let mut residual = target.clone();
    let mut bb = CMatrix::zeros(0, target.ncols());
    let solve = |rf: &CMatrix| -> CMatrix {
        let mut out = CMatrix::zeros(rf.ncols(), target.ncols());
        for j in 0..target.ncols() {
            let col = least_squares(rf, &target.column(j).into_owned());
            out.set_column(j, &col);
        }
        out
    };
    for _ in 0..m_rf {
        let corr = lens.adjoint() * &residual;
        let mut best = None;
        for (k, norm) in col_norms.iter().enumerate() {
            if selected.contains(&k) {
                continue;
            }
            let e: f64 = corr.row(k).iter().map(|z| z.norm_sqr()).sum::<f64>() / norm.powi(2);
            if best.is_none_or(|(_, b)| e > b) {
                best = Some((k, e));
            }
        }
        let Some((k, _)) = best else { break };
        selected.push(k);
        let rf = CMatrix::from_columns(&selected.iter().map(|&i| lens.column(i).into_owned()).collect::<Vec<_>>());
        bb = solve(&rf);
        residual = target - &rf * &bb;
    }
    let mut rf = CMatrix::from_columns(&selected.iter().map(|&i| lens.column(i).into_owned()).collect::<Vec<_>>());
    if one_bit {
        let cols: Vec<CVector> = (0..rf.ncols()).map(|j| one_bit_column(rf.column(j).into_owned(), 64)).collect();
        rf = CMatrix::from_columns(&cols);
        bb = solve(&rf);
    }
    let res = frobenius_sq(&(target - &rf * &bb)).sqrt();
    let mut beamformer = Beamformer { rf, bb };
    beamformer.normalize();
    Ok(HybridDesign { beamformer, selected, residual: res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::lens_matrix;
    use crate::util::seeded_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    const LAMBDA: f64 = 0.299_792 / 60.0;

    fn arr(n: usize) -> ArrayConfig {
        ArrayConfig::half_wavelength(n, LAMBDA)
    }

    #[test]
    fn three_db_width_values() {
        let a = arr(32);
        let d = delta_phi_3db(&a);
        assert_relative_eq!(d.to_degrees(), 3.17, epsilon = 0.01);
        assert_relative_eq!(d, 0.886 * 2.0 / 32.0, max_relative = 5e-3);
        let ratio = delta_phi_3db(&arr(64)) / d;
        assert!((0.45..=0.55).contains(&ratio));
        let half = d / 2.0;
        let g = steering_vector(&a, 0.0).dotc(&steering_vector(&a, half)).norm_sqr();
        assert!((g - 0.5).abs() < 1e-3);
    }

    #[test]
    fn beam_count_rule() {
        assert_eq!(min_beam_count(20f64.to_radians(), 32).unwrap(), 6);
        assert_eq!(min_beam_count(1e-9, 32).unwrap(), 1);
        assert_eq!(min_beam_count(20f64.to_radians(), 64).unwrap(), 12);
        assert!(min_beam_count(3.0, 2).is_err());
        assert!(min_beam_count(0.0, 32).is_err());
    }

    #[test]
    fn bank_centers() {
        let a = arr(32);
        let du = 2.0 * half_power_offset(&a);
        let one = beam_centers(0.3, 1, &a);
        assert_eq!(one, vec![0.3]);
        let three = beam_centers(0.0, 3, &a);
        assert_relative_eq!(three[0], (-du).asin(), max_relative = 1e-12);
        assert_relative_eq!(three[1], 0.0);
        assert_relative_eq!(three[2], du.asin(), max_relative = 1e-12);
        assert_relative_eq!(three[2], delta_phi_3db(&a), max_relative = 1e-3);
        let six = beam_centers(0.0, 6, &a);
        assert_relative_eq!(six[2], (-0.5 * du).asin(), max_relative = 1e-12);
        assert_relative_eq!(six[5], (2.5 * du).asin(), max_relative = 1e-12);
        let off = beam_centers(0.5, 3, &a);
        assert_relative_eq!(off[2].sin() - off[1].sin(), du, max_relative = 1e-12);
    }

    #[test]
    fn adjacent_beams_cross_at_minus_three_db() {
        let a = arr(32);
        for &center in &[0.0, 0.3, -0.6, 0.9] {
            let c = beam_centers(center, 7, &a);
            for w in c.windows(2) {
                let mid = ((w[0].sin() + w[1].sin()) / 2.0).asin();
                let g = steering_vector(&a, w[0]).dotc(&steering_vector(&a, mid)).norm_sqr();
                let db = 10.0 * g.log10();
                assert!((db + 3.0).abs() <= 0.5, "center {center}: {db} dB");
            }
        }
    }

    #[test]
    fn coverage_of_paper_beam_counts() {
        let a = arr(32);
        let sigma = 20f64.to_radians();
        let m = min_beam_count(sigma, 32).unwrap() + 1;
        for &center in &[0.0, -0.35, 0.5] {
            let bf = heuristic_beamformer(center, m, &a).unwrap();
            assert_relative_eq!(frobenius_sq(&bf.composed()).sqrt(), 1.0, epsilon = 1e-9);
            let worst = (0..=400)
                .map(|k| center - sigma / 2.0 + sigma * k as f64 / 400.0)
                .map(|ang| coverage_gain(&bf, &a, ang))
                .fold(f64::INFINITY, f64::min);
            assert!(10.0 * worst.log10() >= -3.5, "center {center}: {}", 10.0 * worst.log10());
        }
        // six beams cover their own span between the outer beam centers at the crossover level
        let bf = heuristic_beamformer(0.0, 6, &a).unwrap();
        let c = beam_centers(0.0, 6, &a);
        let worst = (0..=400)
            .map(|k| c[0] + (c[5] - c[0]) * k as f64 / 400.0)
            .map(|ang| coverage_gain(&bf, &a, ang))
            .fold(f64::INFINITY, f64::min);
        assert!(worst >= 0.45, "worst {worst}");
    }

    #[test]
    fn hybrid_exact_for_lens_target() {
        let a = arr(16);
        let u = lens_matrix(&a);
        let cols = [2usize, 7, 11];
        let raw = CMatrix::from_columns(&cols.iter().map(|&k| u.column(k).into_owned()).collect::<Vec<_>>());
        let target = &raw / Complex64::new(frobenius_sq(&raw).sqrt(), 0.0);
        let d = hybrid_decompose(&target, &u, 3, false).unwrap();
        assert!(d.residual <= 1e-10);
        let mut s = d.selected.clone();
        s.sort_unstable();
        assert_eq!(s, cols.to_vec());
        assert_relative_eq!(frobenius_sq(&d.beamformer.composed()).sqrt(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn hybrid_residual_ordering() {
        let a = arr(16);
        let u = lens_matrix(&a);
        let mut rng = seeded_rng(17);
        for _ in 0..10 {
            let center = rng.random_range(-0.8..0.8);
            let target = heuristic_beamformer(center, 3, &a).unwrap().composed();
            let mut prev = f64::INFINITY;
            for m in 1..=8 {
                let d = hybrid_decompose(&target, &u, m, false).unwrap();
                assert!(d.residual <= prev + 1e-12);
                prev = d.residual;
                let b = hybrid_decompose(&target, &u, m, true).unwrap();
                assert!(b.beamformer.rf.iter().all(|z| z.im == 0.0 && z.re.abs() == 1.0));
                assert!(b.residual >= d.residual - 1e-9, "m={m}: {} < {}", b.residual, d.residual);
                assert_relative_eq!(frobenius_sq(&b.beamformer.composed()).sqrt(), 1.0, epsilon = 1e-9);
            }
        }
        assert!(hybrid_decompose(&CMatrix::zeros(16, 1), &u, 0, false).is_err());
    }
}
