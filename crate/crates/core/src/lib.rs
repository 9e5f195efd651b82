//! Link-level simulation and estimation for wideband millimeter-wave lens MIMO.
//!
//! The crate covers the whole chain from geometry to pose:
//!
//! - [`scene`]: ground-truth BS/MS/scatterer geometry and single-bounce path parameters.
//! - [`channel`]: steering vectors, DFT lens transforms and the beamspace channel.
//! - [`signaling`]: training sensing matrices, noisy training and tracking observations.
//! - [`estimation`]: support-detection channel training, CFAR stopping, delay/gain
//!   recovery, angular refinement and an OMP-style baseline.
//! - [`beamforming`]: 3 dB-overlap heuristic beam banks and hybrid/1-bit decomposition.
//! - [`tracking`]: uplink and downlink extended Kalman filters over LOS delay and angles.
//! - [`localization`]: conversion of LOS parameters to position, rotation and their
//!   uncertainty.
//! - [`harness`]: end-to-end training/tracking runs, Monte Carlo sweeps and result tables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamforming;
pub mod channel;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod localization;
pub mod scene;
pub mod signaling;
pub mod tracking;
pub mod util;

pub use error::{Error, Result};
pub use nalgebra;
pub use num_complex::Complex64;

/// Speed of light in meters per second (0.299792 m/ns).
pub const SPEED_OF_LIGHT: f64 = 0.299_792e9;
