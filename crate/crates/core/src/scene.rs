//! Ground-truth geometry and single-bounce path parameters.

use std::f64::consts::PI;

use nalgebra::Vector2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{seeded_rng, unit_phasor, wrap_pi, wrap_two_pi};
use crate::SPEED_OF_LIGHT;

const MIN_SEPARATION: f64 = 1e-9;

/// BS/MS placement, MS rotation and the scatterer set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub q: Vector2<f64>,
    pub p: Vector2<f64>,
    /// MS rotation in [0, 2π).
    pub alpha: f64,
    pub scatterers: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    Los,
    Nlos,
}

/// Parameters of a single propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    /// Time of arrival in seconds.
    pub tau: f64,
    /// BS-side angle in radians.
    pub theta: f64,
    /// MS-side angle in the MS local frame, radians.
    pub phi: f64,
    pub gain: Complex64,
    /// Power ratio, ≥ 1.
    pub path_loss: f64,
    pub kind: PathKind,
}

/// Carrier and array sizes needed to draw path gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarrierConfig {
    pub carrier_freq: f64,
    pub n_bs: usize,
    pub n_ms: usize,
    /// Extra power loss applied to every NLOS path (≥ 1).
    pub reflection_loss: f64,
    /// Optional small-scale magnitudes |h_k|, indexed by path; missing entries default to 1.
    #[serde(default)]
    pub path_magnitudes: Vec<f64>,
}

impl CarrierConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }
}

impl Default for CarrierConfig {
    fn default() -> Self {
        Self {
            carrier_freq: 60e9,
            n_bs: 32,
            n_ms: 32,
            reflection_loss: 10.0,
            path_magnitudes: Vec::new(),
        }
    }
}

fn bearing(v: Vector2<f64>) -> f64 {
    v.y.atan2(v.x)
}

impl Scene {
    pub fn new(q: Vector2<f64>, p: Vector2<f64>, alpha: f64, scatterers: Vec<Vector2<f64>>) -> Result<Self> {
        let scene = Self { q, p, alpha: wrap_two_pi(alpha), scatterers };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
            && self.alpha.is_finite()
            && self.scatterers.iter().all(|s| s.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::InvalidInput("scene contains non-finite coordinates".into()));
        }
        if (self.p - self.q).norm() < MIN_SEPARATION {
            return Err(Error::DegenerateGeometry("BS and MS coincide".into()));
        }
        for (k, s) in self.scatterers.iter().enumerate() {
            if (s - self.q).norm() < MIN_SEPARATION || (s - self.p).norm() < MIN_SEPARATION {
                return Err(Error::DegenerateGeometry(format!("scatterer {k} coincides with BS or MS")));
            }
        }
        Ok(())
    }

    /// LOS delay, BS-side angle and MS-side angle.
    pub fn los_params(&self) -> (f64, f64, f64) {
        let v = self.p - self.q;
        let theta = bearing(v);
        (v.norm() / SPEED_OF_LIGHT, theta, wrap_pi(theta + PI - self.alpha))
    }

    /// Delay and angles of every path, LOS first, without gains.
    pub fn geometric_paths(&self) -> Vec<(f64, f64, f64, PathKind)> {
        let (tau0, theta0, phi0) = self.los_params();
        let mut out = vec![(tau0, theta0, phi0, PathKind::Los)];
        for s in &self.scatterers {
            let d1 = (s - self.q).norm();
            let d2 = (self.p - s).norm();
            let theta = bearing(s - self.q);
            let phi = wrap_pi(bearing(s - self.p) - self.alpha);
            out.push(((d1 + d2) / SPEED_OF_LIGHT, wrap_pi(theta), phi, PathKind::Nlos));
        }
        out
    }
}

/// Free-space power loss `(4π d/λ)²`, with the reflection factor applied to NLOS paths.
pub fn path_loss(distance: f64, kind: PathKind, config: &CarrierConfig) -> f64 {
    let friis = (4.0 * PI * distance / config.wavelength()).powi(2);
    match kind {
        PathKind::Los => friis,
        PathKind::Nlos => friis * config.reflection_loss.max(1.0),
    }
}

/// Draws path gains with uniform phases and returns all paths, LOS first.
pub fn generate_paths(scene: &Scene, carrier: &CarrierConfig, rng_seed: u64) -> Result<Vec<PathParams>> {
    scene.validate()?;
    if !(carrier.carrier_freq > 0.0) || carrier.n_bs == 0 || carrier.n_ms == 0 {
        return Err(Error::InvalidInput("carrier frequency and array sizes must be positive".into()));
    }
    let mut rng = seeded_rng(rng_seed);
    let array_gain = ((carrier.n_bs * carrier.n_ms) as f64).sqrt();
    Ok(scene
        .geometric_paths()
        .into_iter()
        .enumerate()
        .map(|(k, (tau, theta, phi, kind))| {
            let rho = path_loss(tau * SPEED_OF_LIGHT, kind, carrier).max(1.0);
            let mag = carrier.path_magnitudes.get(k).copied().unwrap_or(1.0);
            let gain = unit_phasor(&mut rng) * (mag * array_gain / rho.sqrt());
            PathParams { tau, theta, phi, gain, path_loss: rho, kind }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn los_along_x_axis() {
        let scene = Scene::new(v(0.0, 0.0), v(10.0, 0.0), 0.0, vec![]).unwrap();
        let paths = generate_paths(&scene, &CarrierConfig::default(), 1).unwrap();
        assert_eq!(paths.len(), 1);
        assert_relative_eq!(paths[0].tau * 1e9, 33.356, epsilon = 1e-3);
        assert_relative_eq!(paths[0].theta, 0.0);
        assert_relative_eq!(paths[0].phi, PI, epsilon = 1e-12);
        assert_eq!(paths[0].kind, PathKind::Los);
    }

    #[test]
    fn rotated_ms_faces_bs() {
        let scene = Scene::new(v(0.0, 0.0), v(10.0, 0.0), PI, vec![]).unwrap();
        let (_, _, phi) = scene.los_params();
        assert!(phi.abs() < 1e-12);
    }

    #[test]
    fn scatterer_path_is_longer() {
        let scene = Scene::new(v(0.0, 0.0), v(10.0, 0.0), 0.0, vec![v(5.0, 5.0)]).unwrap();
        let paths = generate_paths(&scene, &CarrierConfig::default(), 2).unwrap();
        assert_relative_eq!(paths[1].tau * 1e9, 47.17, epsilon = 1e-2);
        assert!(paths[1].tau > paths[0].tau);
        assert_eq!(paths[1].kind, PathKind::Nlos);
    }

    #[test]
    fn friis_values() {
        let mut cfg = CarrierConfig::default();
        let lambda = cfg.wavelength();
        assert_relative_eq!(path_loss(lambda / (4.0 * PI), PathKind::Los, &cfg), 1.0, epsilon = 1e-12);
        cfg.carrier_freq = SPEED_OF_LIGHT / 5e-3;
        assert_relative_eq!(path_loss(10.0, PathKind::Los, &cfg), 6.3165e8, max_relative = 1e-4);
        assert_relative_eq!(path_loss(10.0, PathKind::Nlos, &cfg), 6.3165e9, max_relative = 1e-4);
    }

    #[test]
    fn gain_magnitude_follows_path_loss() {
        let scene = Scene::new(v(0.0, 0.0), v(4.0, 3.0), 1.0, vec![v(2.0, -4.0)]).unwrap();
        let cfg = CarrierConfig::default();
        for p in generate_paths(&scene, &cfg, 9).unwrap() {
            assert_relative_eq!(p.gain.norm(), 32.0 / p.path_loss.sqrt(), max_relative = 1e-12);
        }
    }

    #[test]
    fn degenerate_scenes_rejected() {
        assert!(Scene::new(v(1.0, 1.0), v(1.0, 1.0), 0.0, vec![]).is_err());
        assert!(Scene::new(v(0.0, 0.0), v(1.0, 1.0), 0.0, vec![v(1.0, 1.0)]).is_err());
        assert!(Scene::new(v(0.0, 0.0), v(1.0, 1.0), 0.0, vec![v(0.0, 0.0)]).is_err());
    }

    proptest! {
        #[test]
        fn rotation_identity_and_los_first(
            px in -20.0..20.0f64, py in -20.0..20.0f64, alpha in 0.0..(2.0 * PI),
            sx in -20.0..20.0f64, sy in -20.0..20.0f64,
        ) {
            prop_assume!((px * px + py * py).sqrt() > 0.1);
            let s = v(sx, sy);
            prop_assume!(s.norm() > 0.1 && (s - v(px, py)).norm() > 0.1);
            let scene = Scene::new(v(0.0, 0.0), v(px, py), alpha, vec![s]).unwrap();
            let paths = generate_paths(&scene, &CarrierConfig::default(), 3).unwrap();
            let rebuilt = wrap_two_pi(PI + paths[0].theta - paths[0].phi);
            let diff = wrap_pi(rebuilt - scene.alpha).abs();
            prop_assert!(diff < 1e-12);
            // Triangle inequality makes the bounce strictly longer unless the scatterer is on the segment.
            prop_assert!(paths[1].tau >= paths[0].tau - 1e-15);
            prop_assert!(paths.iter().all(|p| p.path_loss >= 1.0 && p.tau > 0.0));
        }
    }
}
