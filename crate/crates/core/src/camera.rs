//! Pinhole camera with equidistant (Kannala–Brandt) distortion and
//! rolling-shutter observation timing.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseSplineView, RigidTransform};

const MIN_DEPTH: f64 = 1e-6;
// radius / depth below which the projection uses its on-axis limit
const AXIS_RATIO: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let w = self.width as f64;
        let h = self.height as f64;
        if !(self.fu > 0.0 && self.fv > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fu = {}, fv = {})",
                self.fu, self.fv
            )));
        }
        if !(self.cu > 0.0 && self.cu < w && self.cv > 0.0 && self.cv < h) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cu, self.cv, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x < self.width as f64 && pixel.y >= 0.0 && pixel.y < self.height as f64
    }

    #[inline]
    fn distort(&self, theta: f64) -> (f64, f64) {
        let t2 = theta * theta;
        let poly = 1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4)));
        let dpoly = 1.0 + t2 * (3.0 * self.k1 + t2 * (5.0 * self.k2 + t2 * (7.0 * self.k3 + t2 * 9.0 * self.k4)));
        (theta * poly, dpoly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampConvention {
    /// Frame timestamp marks the first image row.
    #[default]
    FirstRow,
    /// Frame timestamp marks the central row (`height / 2`).
    CentralRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraTemporal {
    /// Camera clock offset relative to the IMU clock, seconds.
    pub time_offset: f64,
    /// Rolling-shutter delay between consecutive rows, seconds.
    pub line_delay: f64,
    pub convention: TimestampConvention,
}

impl CameraTemporal {
    pub fn validate(&self) -> Result<()> {
        if !(self.line_delay >= 0.0) {
            return Err(Error::Config(format!("line delay must be >= 0, got {}", self.line_delay)));
        }
        if !(self.time_offset.abs() < 0.5) {
            return Err(Error::Config(format!(
                "time offset {} s outside the +-0.5 s sanity bound",
                self.time_offset
            )));
        }
        Ok(())
    }

    /// Row whose capture time equals the frame timestamp.
    pub fn reference_row(&self, height: u32) -> f64 {
        match self.convention {
            TimestampConvention::FirstRow => 0.0,
            TimestampConvention::CentralRow => height as f64 / 2.0,
        }
    }

    /// IMU-clock capture time of image row `row_v` in a frame stamped `frame_timestamp`.
    pub fn observation_time(&self, frame_timestamp: f64, row_v: f64, height: u32) -> f64 {
        frame_timestamp + self.time_offset + (row_v - self.reference_row(height)) * self.line_delay
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame_id: u64,
    /// Camera clock, seconds.
    pub frame_timestamp: f64,
    pub landmark_id: usize,
    pub pixel: Vector2<f64>,
}

pub fn project(intrinsics: &Intrinsics, point_c: &Vector3<f64>) -> Result<Vector2<f64>> {
    project_with_jacobian(intrinsics, point_c).map(|(p, _)| p)
}

/// Pixel coordinates and `∂pixel/∂point`.
pub fn project_with_jacobian(
    intrinsics: &Intrinsics,
    point_c: &Vector3<f64>,
) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
    let (x, y, z) = (point_c.x, point_c.y, point_c.z);
    if !(z > MIN_DEPTH) {
        return Err(Error::BehindCamera { z });
    }
    let (fu, fv) = (intrinsics.fu, intrinsics.fv);
    let r2 = x * x + y * y;
    let r = r2.sqrt();
    if r < AXIS_RATIO * z {
        let pixel = Vector2::new(fu * x / z + intrinsics.cu, fv * y / z + intrinsics.cv);
        let jac = Matrix2x3::new(fu / z, 0.0, -fu * x / (z * z), 0.0, fv / z, -fv * y / (z * z));
        return Ok((pixel, jac));
    }
    let rho2 = r2 + z * z;
    let theta = r.atan2(z);
    let (theta_d, dtheta_d) = intrinsics.distort(theta);
    let s = theta_d / r;
    let pixel = Vector2::new(fu * s * x + intrinsics.cu, fv * s * y + intrinsics.cv);

    // ∂θ/∂(x, y, z)
    let dtheta = Vector3::new(x * z / (r * rho2), y * z / (r * rho2), -r / rho2);
    let r3 = r2 * r;
    let ds = Vector3::new(
        dtheta_d * dtheta.x / r - theta_d * x / r3,
        dtheta_d * dtheta.y / r - theta_d * y / r3,
        dtheta_d * dtheta.z / r,
    );
    let jac = Matrix2x3::new(
        fu * (s + x * ds.x),
        fu * x * ds.y,
        fu * x * ds.z,
        fv * y * ds.x,
        fv * (s + y * ds.y),
        fv * y * ds.z,
    );
    Ok((pixel, jac))
}

/// Unit bearing of a pixel, inverting the distortion polynomial by Newton iteration.
pub fn unproject(intrinsics: &Intrinsics, pixel: &Vector2<f64>) -> Result<Vector3<f64>> {
    let mx = (pixel.x - intrinsics.cu) / intrinsics.fu;
    let my = (pixel.y - intrinsics.cv) / intrinsics.fv;
    let theta_d = (mx * mx + my * my).sqrt();
    if theta_d < 1e-14 {
        return Ok(Vector3::z());
    }
    let mut theta = theta_d;
    let mut converged = false;
    for _ in 0..20 {
        let (f, df) = intrinsics.distort(theta);
        let step = (f - theta_d) / df;
        theta -= step;
        if step.abs() < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged || !theta.is_finite() || theta < 0.0 {
        return Err(Error::NonConvergence(format!(
            "distortion inversion at pixel ({}, {})",
            pixel.x, pixel.y
        )));
    }
    let (s, c) = theta.sin_cos();
    Ok(Vector3::new(s * mx / theta_d, s * my / theta_d, c))
}

/// Reprojection residual in pixels: `h(T_CI · T_WI(t_obs)⁻¹ · l_W) - z`,
/// with `t_obs` taken at the measured row of the observation.
pub fn reprojection_residual(
    obs: &Observation,
    pose_spline: &PoseSplineView,
    t_ci: &RigidTransform,
    temporal: &CameraTemporal,
    intrinsics: &Intrinsics,
    landmark_w: &Vector3<f64>,
) -> Result<Vector2<f64>> {
    let t = temporal.observation_time(obs.frame_timestamp, obs.pixel.y, intrinsics.height);
    let t_wi = pose_spline.pose_at(t)?;
    let point_c = t_ci.transform_point(&t_wi.inverse().transform_point(landmark_w));
    Ok(project(intrinsics, &point_c)? - obs.pixel)
}

/// Line delay of a sensor that clocks out `line_length_px` pixels per row.
pub fn line_delay_from_specs(line_length_px: u32, pixel_clock_hz: f64) -> Result<f64> {
    if line_length_px == 0 || !(pixel_clock_hz > 0.0) {
        return Err(Error::Argument(format!(
            "line length {line_length_px} px and pixel clock {pixel_clock_hz} Hz must be positive"
        )));
    }
    Ok(line_length_px as f64 / pixel_clock_hz)
}
