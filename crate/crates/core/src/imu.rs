//! Inertial measurement prediction from the pose spline and IMU residuals.
//!
//! The bias spline stacks the gyroscope bias in rows 0–2 and the
//! accelerometer bias in rows 3–5.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSplineView;
use crate::splines::VectorSpline;

pub const STANDARD_GRAVITY: f64 = 9.80665;

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_a: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_ba: f64,
    /// Gyroscope white noise, rad/s/√Hz.
    pub sigma_g: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub sigma_bg: f64,
    pub rate_hz: f64,
}

impl ImuNoise {
    /// ADIS16448 values of the Kalibr sample dataset.
    pub fn adis16448(rate_hz: f64) -> Self {
        Self {
            sigma_a: 1.0e-2,
            sigma_ba: 2.0e-4,
            sigma_g: 5.0e-3,
            sigma_bg: 4.0e-6,
            rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_a, self.sigma_ba, self.sigma_g, self.sigma_bg, self.rate_hz];
        if all.iter().all(|x| *x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("IMU noise parameters must be positive: {self:?}")))
        }
    }

    /// Per-sample accelerometer standard deviation `σ_a √rate`.
    pub fn accel_sample_std(&self) -> f64 {
        self.sigma_a * self.rate_hz.sqrt()
    }

    pub fn gyro_sample_std(&self) -> f64 {
        self.sigma_g * self.rate_hz.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImuModelKind {
    #[default]
    Calibrated,
    ScaleMisalignment,
}

/// Systematic-error matrices of the scale-misalignment model. The calibrated
/// model uses `M_a = I`, `M_g = I`, `M_s = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuIntrinsics {
    pub model: ImuModelKind,
    /// Lower triangular.
    pub accel_matrix: Matrix3<f64>,
    pub gyro_matrix: Matrix3<f64>,
    pub g_sensitivity: Matrix3<f64>,
}

impl ImuIntrinsics {
    pub fn calibrated() -> Self {
        Self {
            model: ImuModelKind::Calibrated,
            accel_matrix: Matrix3::identity(),
            gyro_matrix: Matrix3::identity(),
            g_sensitivity: Matrix3::zeros(),
        }
    }

    pub fn scale_misalignment(accel: Matrix3<f64>, gyro: Matrix3<f64>, g_sensitivity: Matrix3<f64>) -> Result<Self> {
        let intr = Self {
            model: ImuModelKind::ScaleMisalignment,
            accel_matrix: accel,
            gyro_matrix: gyro,
            g_sensitivity,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn with_model(model: ImuModelKind) -> Self {
        Self {
            model,
            ..Self::calibrated()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.accel_matrix;
        if m[(0, 1)] != 0.0 || m[(0, 2)] != 0.0 || m[(1, 2)] != 0.0 {
            return Err(Error::Config("accelerometer matrix must be lower triangular".into()));
        }
        if !(0..3).all(|i| m[(i, i)] > 0.0) {
            return Err(Error::Config("accelerometer scale factors must be positive".into()));
        }
        if self.model == ImuModelKind::Calibrated
            && (self.accel_matrix != Matrix3::identity()
                || self.gyro_matrix != Matrix3::identity()
                || self.g_sensitivity != Matrix3::zeros())
        {
            return Err(Error::Config("calibrated IMU model fixes M_a = M_g = I and M_s = 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// IMU clock, seconds.
    pub timestamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityState {
    direction: Vector3<f64>,
    magnitude: f64,
}

impl GravityState {
    pub fn new(direction: Vector3<f64>, magnitude: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n > 1e-12) || !(magnitude > 0.0) {
            return Err(Error::Argument(format!(
                "invalid gravity: direction {direction:?}, magnitude {magnitude}"
            )));
        }
        Ok(Self {
            direction: direction / n,
            magnitude,
        })
    }

    pub fn standard(direction: Vector3<f64>) -> Result<Self> {
        Self::new(direction, STANDARD_GRAVITY)
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    /// `g^W`.
    pub fn vector(&self) -> Vector3<f64> {
        self.direction * self.magnitude
    }

    /// Orthonormal basis `[b1 b2]` of the tangent plane at the current direction.
    pub fn tangent_basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.direction;
        let helper = if d.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let b1 = d.cross(&helper).normalize();
        let b2 = d.cross(&b1);
        (b1, b2)
    }

    /// Rotates the direction by `Exp(b1·δ₁ + b2·δ₂)`; the norm stays exactly one.
    pub fn perturbed(&self, delta: [f64; 2]) -> Self {
        let (b1, b2) = self.tangent_basis();
        let axis = b1 * delta[0] + b2 * delta[1];
        let rotated = crate::geometry::exp_so3(&axis) * self.direction;
        Self {
            direction: rotated / rotated.norm(),
            magnitude: self.magnitude,
        }
    }
}

/// `a_s^I = R_WIᵀ (p̈ - g^W)`.
pub fn predicted_specific_force(pose_spline: &PoseSplineView, gravity: &GravityState, t: f64) -> Result<Vector3<f64>> {
    let k = pose_spline.kinematics(t)?;
    let r = crate::geometry::exp_so3(&k.phi);
    Ok(r.transpose() * (k.acceleration - gravity.vector()))
}

/// Body-frame angular rate `ω_WI^I`.
pub fn predicted_angular_rate(pose_spline: &PoseSplineView, t: f64) -> Result<Vector3<f64>> {
    pose_spline.angular_rate(t)
}

fn bias_at(bias_spline: &VectorSpline, t: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if bias_spline.dim() != 6 {
        return Err(Error::Argument(format!("bias spline must be 6-dimensional, got {}", bias_spline.dim())));
    }
    let mut b = [0.0; 6];
    bias_spline.evaluate_into(t, 0, &mut b)?;
    Ok((Vector3::new(b[0], b[1], b[2]), Vector3::new(b[3], b[4], b[5])))
}

/// Whitened accelerometer residual `(a_m - M_a a_s - b_a) / (σ_a √rate)`.
pub fn accel_residual(
    sample: &ImuSample,
    pose_spline: &PoseSplineView,
    bias_spline: &VectorSpline,
    intrinsics: &ImuIntrinsics,
    gravity: &GravityState,
    noise: &ImuNoise,
) -> Result<Vector3<f64>> {
    let a_s = predicted_specific_force(pose_spline, gravity, sample.timestamp)?;
    let (_, b_a) = bias_at(bias_spline, sample.timestamp)?;
    let predicted = match intrinsics.model {
        ImuModelKind::Calibrated => a_s + b_a,
        ImuModelKind::ScaleMisalignment => intrinsics.accel_matrix * a_s + b_a,
    };
    Ok((sample.accel - predicted) / noise.accel_sample_std())
}

/// Whitened gyroscope residual `(ω_m - M_g ω - M_s a_s - b_g) / (σ_g √rate)`.
pub fn gyro_residual(
    sample: &ImuSample,
    pose_spline: &PoseSplineView,
    bias_spline: &VectorSpline,
    intrinsics: &ImuIntrinsics,
    gravity: &GravityState,
    noise: &ImuNoise,
) -> Result<Vector3<f64>> {
    let omega = predicted_angular_rate(pose_spline, sample.timestamp)?;
    let (b_g, _) = bias_at(bias_spline, sample.timestamp)?;
    let predicted = match intrinsics.model {
        ImuModelKind::Calibrated => omega + b_g,
        ImuModelKind::ScaleMisalignment => {
            let a_s = predicted_specific_force(pose_spline, gravity, sample.timestamp)?;
            intrinsics.gyro_matrix * omega + intrinsics.g_sensitivity * a_s + b_g
        }
    };
    Ok((sample.gyro - predicted) / noise.gyro_sample_std())
}

/// `(ḃ_a/σ_ba, ḃ_g/σ_bg)` at `t`.
pub fn bias_prior_residual(bias_spline: &VectorSpline, t: f64, noise: &ImuNoise) -> Result<[f64; 6]> {
    let mut d = [0.0; 6];
    bias_spline.evaluate_into(t, 1, &mut d)?;
    Ok([
        d[3] / noise.sigma_ba,
        d[4] / noise.sigma_ba,
        d[5] / noise.sigma_ba,
        d[0] / noise.sigma_bg,
        d[1] / noise.sigma_bg,
        d[2] / noise.sigma_bg,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, log_so3};
    use crate::splines::{fit_least_squares, KnotGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_pose(phi: [f64; 3], p: [f64; 3]) -> PoseSplineView {
        let knots = KnotGrid::new(0.0, 0.1, 30).unwrap();
        let cp = [phi[0], phi[1], phi[2], p[0], p[1], p[2]];
        let cps = std::iter::repeat_n(cp, 24).flatten().collect();
        PoseSplineView::new(VectorSpline::new(6, 6, knots, cps).unwrap()).unwrap()
    }

    fn polynomial_pose(coeffs: impl Fn(f64) -> [f64; 6]) -> PoseSplineView {
        let knots = KnotGrid::new(0.0, 0.1, 40).unwrap();
        let (a, b) = knots.valid_domain(6);
        let samples: Vec<(f64, Vec<f64>)> = (0..=400)
            .map(|i| a + (b - a) * i as f64 / 400.0)
            .map(|t| (t, coeffs(t).to_vec()))
            .collect();
        PoseSplineView::new(fit_least_squares(&samples, 6, knots, 0.0).unwrap()).unwrap()
    }

    fn random_pose(seed: u64) -> PoseSplineView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        polynomial_pose(move |t| {
            let mut out = [0.0; 6];
            for (i, o) in out.iter_mut().enumerate() {
                *o = c[3 * i] + c[3 * i + 1] * (t - 2.0) + 0.3 * c[3 * i + 2] * (t - 2.0).powi(3);
            }
            out
        })
    }

    #[test]
    fn rest_specific_force() {
        let view = constant_pose([0.0; 3], [0.0; 3]);
        let g = GravityState::standard(Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let a = predicted_specific_force(&view, &g, 1.0).unwrap();
        assert!((a - Vector3::new(0.0, 0.0, STANDARD_GRAVITY)).norm() < 1e-12);
    }

    #[test]
    fn free_fall_has_no_specific_force() {
        let g = GravityState::standard(Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let view = polynomial_pose(|t| [0.1, 0.2, 0.3, 0.0, 0.0, -0.5 * STANDARD_GRAVITY * t * t]);
        let a = predicted_specific_force(&view, &g, 2.0).unwrap();
        assert!(a.norm() < 1e-8, "{a}");
    }

    #[test]
    fn constant_rotation_has_zero_rate() {
        let view = constant_pose([0.5, -0.3, 1.1], [0.0; 3]);
        assert!(predicted_angular_rate(&view, 1.3).unwrap().norm() < 1e-10);
    }

    #[test]
    fn z_spin_rate() {
        let view = polynomial_pose(|t| [0.0, 0.0, 1.7 * t, 0.0, 0.0, 0.0]);
        let w = predicted_angular_rate(&view, 2.0).unwrap();
        assert!((w - Vector3::new(0.0, 0.0, 1.7)).norm() < 1e-9);
    }

    #[test]
    fn predictions_match_finite_difference_oracles() {
        let g = GravityState::standard(Vector3::new(0.1, -0.2, -1.0)).unwrap();
        for seed in 0..20 {
            let view = random_pose(seed);
            let t = 2.1;
            let h = 1e-4;
            // specific force from second differences of position
            let p = |t| view.pose_at(t).unwrap().translation;
            let acc = (p(t + h) - 2.0 * p(t) + p(t - h)) / (h * h);
            let r = view.pose_at(t).unwrap().rotation;
            let expected = r.matrix().transpose() * (acc - g.vector());
            let a = predicted_specific_force(&view, &g, t).unwrap();
            assert!((a - expected).norm() <= 1e-4 * expected.norm());

            let hr = 1e-6;
            let r0 = *view.pose_at(t).unwrap().rotation.matrix();
            let r1 = *view.pose_at(t + hr).unwrap().rotation.matrix();
            let expected = log_so3(&(r0.transpose() * r1)) / hr;
            let w = predicted_angular_rate(&view, t).unwrap();
            assert!((w - expected).norm() <= 1e-4 * expected.norm().max(1e-3));
        }
    }

    #[test]
    fn frame_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let view = random_pose(3);
        let g = GravityState::standard(Vector3::new(0.0, 1.0, 0.1)).unwrap();
        for _ in 0..10 {
            let q = exp_so3(&Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
            // rotate the world frame: R' = Q R, p' = Q p, g' = Q g
            let (a, b) = view.domain();
            let samples: Vec<(f64, Vec<f64>)> = (0..=600)
                .map(|i| a + (b - a) * i as f64 / 600.0)
                .map(|t| {
                    let pose = view.pose_at(t).unwrap();
                    let phi = log_so3(&(q * pose.rotation.matrix()));
                    let p = q * pose.translation;
                    (t, vec![phi.x, phi.y, phi.z, p.x, p.y, p.z])
                })
                .collect();
            let phis: Vec<Vector3<f64>> = samples.iter().map(|(_, v)| Vector3::new(v[0], v[1], v[2])).collect();
            let phis = crate::geometry::enforce_continuity(&phis);
            let samples: Vec<(f64, Vec<f64>)> = samples
                .into_iter()
                .zip(phis)
                .map(|((t, v), phi)| (t, vec![phi.x, phi.y, phi.z, v[3], v[4], v[5]]))
                .collect();
            let rotated = PoseSplineView::new(fit_least_squares(&samples, 6, *view.spline().knots(), 0.0).unwrap()).unwrap();
            let g_rot = GravityState::standard(q * g.direction()).unwrap();
            let t = 2.0;
            let a0 = predicted_specific_force(&view, &g, t).unwrap();
            let a1 = predicted_specific_force(&rotated, &g_rot, t).unwrap();
            let w0 = predicted_angular_rate(&view, t).unwrap();
            let w1 = predicted_angular_rate(&rotated, t).unwrap();
            // the refit is exact only up to the approximation of a rotated angle-axis curve
            assert!((a0 - a1).norm() < 1e-6 * a0.norm(), "{a0} {a1}");
            assert!((w0 - w1).norm() < 1e-6 * w0.norm().max(1.0));
        }
    }

    #[test]
    fn model_nesting_is_bitwise() {
        let view = random_pose(9);
        let knots = KnotGrid::new(0.0, 0.2, 25).unwrap();
        let bias = VectorSpline::new(6, 6, knots, (0..19 * 6).map(|i| 1e-3 * (i as f64).sin()).collect()).unwrap();
        let g = GravityState::standard(Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let noise = ImuNoise::adis16448(200.0);
        let sample = ImuSample {
            timestamp: 2.0,
            gyro: Vector3::new(0.1, 0.2, -0.3),
            accel: Vector3::new(1.0, -2.0, 9.0),
        };
        let cal = ImuIntrinsics::calibrated();
        let sm = ImuIntrinsics::with_model(ImuModelKind::ScaleMisalignment);
        assert_eq!(
            accel_residual(&sample, &view, &bias, &cal, &g, &noise).unwrap(),
            accel_residual(&sample, &view, &bias, &sm, &g, &noise).unwrap()
        );
        assert_eq!(
            gyro_residual(&sample, &view, &bias, &cal, &g, &noise).unwrap(),
            gyro_residual(&sample, &view, &bias, &sm, &g, &noise).unwrap()
        );
    }

    #[test]
    fn g_sensitivity_shifts_gyro_prediction() {
        let view = constant_pose([0.0; 3], [0.0; 3]);
        let knots = KnotGrid::new(0.0, 0.2, 20).unwrap();
        let bias = VectorSpline::zeros(6, 6, knots).unwrap();
        let g = GravityState::standard(Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let noise = ImuNoise::adis16448(200.0);
        let ms = Matrix3::new(0.0, 0.0, 1e-3, 0.0, 0.0, -2e-3, 0.0, 0.0, 0.0);
        let intr = ImuIntrinsics::scale_misalignment(Matrix3::identity(), Matrix3::identity(), ms).unwrap();
        let sample = ImuSample {
            timestamp: 1.5,
            gyro: Vector3::zeros(),
            accel: Vector3::new(0.0, 0.0, STANDARD_GRAVITY),
        };
        let r = gyro_residual(&sample, &view, &bias, &intr, &g, &noise).unwrap() * noise.gyro_sample_std();
        let expected = -(ms * Vector3::new(0.0, 0.0, STANDARD_GRAVITY));
        assert!((r - expected).norm() < 1e-12);
    }

    #[test]
    fn rest_bias_residual() {
        let view = constant_pose([0.0; 3], [0.0; 3]);
        let knots = KnotGrid::new(0.0, 0.2, 20).unwrap();
        let b_a = [0.02, -0.01, 0.05];
        let cp = [0.0, 0.0, 0.0, b_a[0], b_a[1], b_a[2]];
        let bias = VectorSpline::new(6, 6, knots, std::iter::repeat_n(cp, 14).flatten().collect()).unwrap();
        let g = GravityState::standard(Vector3::new(0.0, 0.0, -1.0)).unwrap();
        let noise = ImuNoise::adis16448(200.0);
        let sample = ImuSample {
            timestamp: 1.5,
            gyro: Vector3::zeros(),
            accel: Vector3::new(b_a[0], b_a[1], STANDARD_GRAVITY + b_a[2]),
        };
        let cal = ImuIntrinsics::calibrated();
        assert!(accel_residual(&sample, &view, &bias, &cal, &g, &noise).unwrap().norm() < 1e-12);
        let zero_bias = VectorSpline::zeros(6, 6, knots).unwrap();
        assert!(accel_residual(&sample, &view, &zero_bias, &cal, &g, &noise).unwrap().norm() > 0.1);
    }

    #[test]
    fn bias_prior_examples() {
        let knots = KnotGrid::new(0.0, 0.2, 20).unwrap();
        let noise = ImuNoise::adis16448(200.0);
        let constant = VectorSpline::new(6, 6, knots, vec![0.3; 14 * 6]).unwrap();
        assert!(bias_prior_residual(&constant, 1.5, &noise).unwrap().iter().all(|x| x.abs() < 1e-9));

        let (a, b) = knots.valid_domain(6);
        let slope = [1e-3, 2e-3, -1e-3, 5e-4, 0.0, 1e-4];
        let samples: Vec<(f64, Vec<f64>)> = (0..=50)
            .map(|i| a + (b - a) * i as f64 / 50.0)
            .map(|t| (t, slope.iter().map(|s| s * t).collect()))
            .collect();
        let drift = fit_least_squares(&samples, 6, knots, 0.0).unwrap();
        let r = bias_prior_residual(&drift, 1.5, &noise).unwrap();
        for i in 0..3 {
            assert!((r[i] - slope[3 + i] / noise.sigma_ba).abs() < 1e-6 * (slope[3 + i] / noise.sigma_ba).abs().max(1.0));
            assert!((r[3 + i] - slope[i] / noise.sigma_bg).abs() < 1e-6 * (slope[i] / noise.sigma_bg).abs().max(1.0));
        }
        let doubled = ImuNoise { sigma_ba: 2.0 * noise.sigma_ba, ..noise };
        let r2 = bias_prior_residual(&drift, 1.5, &doubled).unwrap();
        assert!((r2[0] - 0.5 * r[0]).abs() < 1e-12 * r[0].abs());
    }

    #[test]
    fn gravity_perturbation_keeps_unit_norm() {
        let mut g = GravityState::standard(Vector3::new(0.3, 0.9, -0.1)).unwrap();
        for i in 0..1000 {
            g = g.perturbed([1e-3 * (i as f64).sin(), 0.5 * (i as f64).cos()]);
            assert!((g.direction().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accel_sample_std_scales_with_rate() {
        let noise = ImuNoise {
            sigma_a: 1e-2,
            ..ImuNoise::adis16448(200.0)
        };
        assert!((noise.accel_sample_std() - 0.1414213562).abs() < 1e-9);
    }
}
