//! Position and rotation from LOS delay and angles, with uncertainty propagation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::util::wrap_two_pi;
use crate::SPEED_OF_LIGHT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub p_hat: Vector2<f64>,
    pub alpha_hat: f64,
    /// Information-form position covariance.
    pub p_cov: Matrix2<f64>,
    /// First-order forward-propagated position covariance.
    pub p_cov_forward: Matrix2<f64>,
    pub alpha_var: f64,
}

/// `p = q + c·τ·[cos θ, sin θ]`, `α = π + θ − φ` wrapped to [0, 2π).
pub fn params_to_pose(q: &Vector2<f64>, tau0: f64, theta0: f64, phi0: f64) -> (Vector2<f64>, f64) {
    let r = SPEED_OF_LIGHT * tau0;
    (q + Vector2::new(theta0.cos(), theta0.sin()) * r, wrap_two_pi(PI + theta0 - phi0))
}

/// Conversion matrix `T = [∂τ/∂p, ∂θ/∂p]`.
pub fn conversion_matrix(tau0: f64, theta0: f64) -> Matrix2<f64> {
    let (s, c) = theta0.sin_cos();
    let a = 1.0 / SPEED_OF_LIGHT;
    let b = 1.0 / (SPEED_OF_LIGHT * tau0);
    Matrix2::new(a * c, -b * s, a * s, b * c)
}

/// Position and rotation covariance from the filter covariances.
///
/// `p_ul_cov` is the uplink covariance with `τ` and `θ` leading. The position
/// covariance is `(T·[P_ul⁻¹]_{1:2,1:2}·Tᵀ)⁻¹`; the forward first-order form
/// `T⁻ᵀ [P_ul]_{1:2,1:2} T⁻¹` is returned alongside.
pub fn pose_covariance(tau0: f64, theta0: f64, p_ul_cov: &DMatrix<f64>, p_dl_phi_var: f64) -> Result<(Matrix2<f64>, Matrix2<f64>, f64)> {
    if !(tau0 > 0.0) {
        return Err(invalid("delay must be positive"));
    }
    if p_ul_cov.nrows() < 2 || !p_ul_cov.is_square() {
        return Err(Error::DimensionMismatch("uplink covariance must be square with at least two rows".into()));
    }
    let info = p_ul_cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("uplink covariance is singular".into()))?;
    let j = Matrix2::new(info[(0, 0)], info[(0, 1)], info[(1, 0)], info[(1, 1)]);
    let t = conversion_matrix(tau0, theta0);
    let jp = t * j * t.transpose();
    let p_cov = jp
        .try_inverse()
        .ok_or_else(|| Error::Singular("position information matrix is singular".into()))?;
    let marg = Matrix2::new(p_ul_cov[(0, 0)], p_ul_cov[(0, 1)], p_ul_cov[(1, 0)], p_ul_cov[(1, 1)]);
    let t_inv = t.try_inverse().ok_or_else(|| Error::Singular("conversion matrix is singular".into()))?;
    let forward = t_inv.transpose() * marg * t_inv;
    let sym = |m: Matrix2<f64>| (m + m.transpose()) * 0.5;
    Ok((sym(p_cov), sym(forward), p_ul_cov[(1, 1)] + p_dl_phi_var))
}

/// Pose and uncertainty from the tracked LOS parameters.
pub fn estimate_pose(q: &Vector2<f64>, tau0: f64, theta0: f64, phi0: f64, p_ul_cov: &DMatrix<f64>, p_dl_phi_var: f64) -> Result<PoseEstimate> {
    let (p_hat, alpha_hat) = params_to_pose(q, tau0, theta0, phi0);
    let (p_cov, p_cov_forward, alpha_var) = pose_covariance(tau0, theta0, p_ul_cov, p_dl_phi_var)?;
    Ok(PoseEstimate { p_hat, alpha_hat, p_cov, p_cov_forward, alpha_var })
}
