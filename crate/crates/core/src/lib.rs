//! Continuous-time spatiotemporal calibration of rolling-shutter camera / IMU rigs.
//!
//! The trajectory of the IMU relative to a planar calibration target is a
//! vector-valued uniform B-spline over angle-axis and translation. Camera
//! corner observations are evaluated at their per-row capture time, which
//! makes the camera time offset and the rolling-shutter line delay ordinary
//! parameters of a sparse nonlinear least-squares problem alongside the
//! camera-IMU extrinsics, gravity direction, and IMU biases.
//!
//! Besides the estimator the crate contains a closed-loop simulator and an
//! Allan-deviation tool for identifying IMU noise densities.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allan;
pub mod camera;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod imu;
pub mod io;
pub mod linalg;
pub mod simulator;
pub mod splines;
pub mod target;

pub use error::{Error, Result};
