//! Small numeric helpers shared across modules.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type CVector = DVector<Complex64>;
pub type CMatrix = DMatrix<Complex64>;
pub type SimRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a master seed and a stream label.
///
/// SplitMix64 finalizer over `master ^ golden * (stream + 1)`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Wraps an angle to (−π, π].
pub fn wrap_pi(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Wraps an angle to [0, 2π).
pub fn wrap_two_pi(angle: f64) -> f64 {
    let a = angle.rem_euclid(2.0 * PI);
    if a >= 2.0 * PI {
        0.0
    } else {
        a
    }
}

/// Shortest signed arc from `from` to `to`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    wrap_pi(to - from)
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

pub fn unit_phasor<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Complex64::from_polar(1.0, rng.random_range(-PI..PI))
}

pub fn frobenius_sq(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn energy(v: &CVector) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

pub fn total_energy(vs: &[CVector]) -> f64 {
    vs.iter().map(energy).sum()
}

/// Minimum-norm least-squares solve of `a x ≈ b` via SVD, discarding singular
/// values below `1e-10` of the largest.
pub fn least_squares(a: &CMatrix, b: &CVector) -> CVector {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return CVector::zeros(a.ncols());
    }
    svd.solve(b, 1e-10 * smax).unwrap_or_else(|_| CVector::zeros(a.ncols()))
}

/// Symmetrizes a real square matrix in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn deg(rad: f64) -> f64 {
    rad.to_degrees()
}

pub fn rad(deg: f64) -> f64 {
    deg.to_radians()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrapping_ranges() {
        assert!((wrap_pi(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_pi(-PI) - PI).abs() < 1e-12);
        assert!((wrap_two_pi(-0.5) - (2.0 * PI - 0.5)).abs() < 1e-12);
        assert!((angle_diff(rad(-179.0), rad(179.0)) - rad(2.0)).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        assert_ne!(derive_seed(7, 3), derive_seed(7, 4));
        assert_ne!(derive_seed(7, 3), derive_seed(8, 3));
    }

    #[test]
    fn least_squares_recovers_exact_solution() {
        let a = CMatrix::from_fn(6, 3, |i, j| Complex64::new(((i + 1) * (j + 2)) as f64 % 5.0, (i * i * j) as f64 - 1.0));
        let x = CVector::from_vec(vec![
            Complex64::new(1.0, -1.0),
            Complex64::new(0.5, 2.0),
            Complex64::new(-3.0, 0.0),
        ]);
        let b = &a * &x;
        assert_eq!(a.rank(1e-9), 3);
        let got = least_squares(&a, &b);
        assert!((got - x).norm() < 1e-9);
        let dup = CMatrix::from_columns(&[a.column(0).into_owned(), a.column(0).into_owned()]);
        let y = a.column(0) * Complex64::new(2.0, 0.0);
        let z = least_squares(&dup, &y);
        assert!((z[0] - Complex64::new(1.0, 0.0)).norm() < 1e-9 && (z[1] - z[0]).norm() < 1e-9);
    }
}
