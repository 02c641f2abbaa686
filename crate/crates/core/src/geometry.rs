//! Rotations, rigid transforms and the pose spline.
//!
//! Orientation on the trajectory spline is an angle-axis vector `φ`, so the
//! map `φ ↦ R` and its right Jacobian `J_r(φ)` (with `Exp(φ + δ) ≈ Exp(φ)·Exp(J_r δ)`)
//! appear in every residual. Angular rate follows the body-frame convention
//! `ω = J_r(φ) φ̇`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::VectorSpline;

const SMALL_ANGLE: f64 = 1e-8;
// below this angle the Jacobian coefficients use their Taylor series
const SERIES_ANGLE: f64 = 0.1;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues formula.
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if theta2.sqrt() < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
}

/// Minimal angle-axis vector with angle in `[0, π]`.
///
/// At exactly `π` the axis sign is ambiguous; the component of largest
/// magnitude is made positive.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let skew = vee(&(r - r.transpose())) * 0.5;
    let s = skew.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if theta < SMALL_ANGLE {
        return skew * (1.0 + theta * theta / 6.0);
    }
    if PI - theta > 1e-3 {
        return skew * (theta / s);
    }
    // near π: the symmetric part is (1 - cos θ) n nᵀ
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let one_minus_c = 1.0 - c;
    let i = (0..3)
        .max_by(|&a, &b2| b[(a, a)].total_cmp(&b[(b2, b2)]))
        .unwrap_or(0);
    let ni = (b[(i, i)] / one_minus_c).max(0.0).sqrt();
    let mut axis = b.column(i) / (one_minus_c * ni);
    axis.normalize_mut();
    if skew.dot(&axis) < 0.0 {
        axis = -axis;
    } else if skew.norm() < 1e-12 {
        let (imax, _) = axis
            .iter()
            .enumerate()
            .max_by(|a, b2| a.1.abs().total_cmp(&b2.1.abs()))
            .unwrap_or((0, &0.0));
        if axis[imax] < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

/// `(1 - cos θ)/θ²` and `(θ - sin θ)/θ³`.
fn jacobian_coefficients(theta: f64) -> (f64, f64) {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        let a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 * t2 * t2 / 40320.0
            + t2 * t2 * t2 * t2 / 3628800.0;
        let b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0
            + t2 * t2 * t2 * t2 / 39916800.0;
        (a, b)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// `a'(θ)/θ` and `b'(θ)/θ` for the coefficients above.
fn jacobian_coefficient_slopes(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        let da = -2.0 / 24.0 + 4.0 * t2 / 720.0 - 6.0 * t2 * t2 / 40320.0
            + 8.0 * t2 * t2 * t2 / 3628800.0;
        let db = -2.0 / 120.0 + 4.0 * t2 / 5040.0 - 6.0 * t2 * t2 / 362880.0
            + 8.0 * t2 * t2 * t2 / 39916800.0;
        (da, db)
    } else {
        let (s, c) = theta.sin_cos();
        let da = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        let db = (theta * (1.0 - c) - 3.0 * (theta - s)) / (t2 * t2 * theta);
        (da, db)
    }
}

/// Right Jacobian of the rotation exponential.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = jacobian_coefficients(phi.norm());
    let k = hat(phi);
    Matrix3::identity() - a * k + b * k * k
}

/// `∂(J_r(φ) v)/∂φ`.
pub fn right_jacobian_product_derivative(phi: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b) = jacobian_coefficients(theta);
    let (da, db) = jacobian_coefficient_slopes(theta);
    let cross = phi.cross(v);
    let double_cross = phi.cross(&cross);
    a * hat(v) - da * cross * phi.transpose()
        + b * (Matrix3::identity() * phi.dot(v) + phi * v.transpose() - 2.0 * v * phi.transpose())
        + db * double_cross * phi.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Accepts `m` if it is orthonormal with determinant +1 to within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "not a rotation matrix (orthogonality error {ortho:e}, det {det})"
            )));
        }
        Ok(Self(m))
    }

    /// Nearest rotation in the Frobenius sense.
    pub fn orthonormalized(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * vt)
    }

    pub fn from_angle_axis(phi: &Vector3<f64>) -> Self {
        Self(exp_so3(phi))
    }

    pub fn angle_axis(&self) -> Vector3<f64> {
        log_so3(&self.0)
    }

    pub fn angle(&self) -> f64 {
        self.angle_axis().norm()
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

pub fn angle_axis_to_rotation(phi: &Vector3<f64>) -> Rotation {
    Rotation::from_angle_axis(phi)
}

pub fn rotation_to_angle_axis(r: &Rotation) -> Vector3<f64> {
    r.angle_axis()
}

/// `x ↦ R x + p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_angle_axis(phi: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(Rotation::from_angle_axis(&phi), translation)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt.matrix() * self.translation))
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation.compose(&other.rotation),
            self.rotation.matrix() * other.translation + self.translation,
        )
    }
}

/// Unwraps an angle-axis sequence: each vector is replaced by the equivalent
/// `(θ + 2πk)·axis` closest to its predecessor.
pub fn enforce_continuity(raw: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(raw.len());
    for phi in raw {
        let Some(prev) = out.last() else {
            out.push(*phi);
            continue;
        };
        let theta = phi.norm();
        let axis = if theta > 1e-12 {
            phi / theta
        } else if prev.norm() > 1e-12 {
            prev.normalize()
        } else {
            out.push(*phi);
            continue;
        };
        let turns = ((prev.dot(&axis) - theta) / (2.0 * PI)).round() as i64;
        let best = (turns - 1..=turns + 1)
            .map(|k| if k == 0 { *phi } else { axis * (theta + 2.0 * PI * k as f64) })
            .min_by(|a, b| (a - prev).norm_squared().total_cmp(&(b - prev).norm_squared()))
            .unwrap_or(*phi);
        out.push(best);
    }
    out
}

/// Pose spline: rows 0–2 angle-axis of `R_WI`, rows 3–5 translation `p_WI`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSplineView {
    spline: VectorSpline,
}

/// Orientation and position of the pose spline with up to two time derivatives.
#[derive(Debug, Clone, Copy)]
pub struct PoseKinematics {
    pub phi: Vector3<f64>,
    pub phi_dot: Vector3<f64>,
    pub phi_ddot: Vector3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl PoseSplineView {
    pub fn new(spline: VectorSpline) -> Result<Self> {
        if spline.dim() != 6 {
            return Err(Error::Argument(format!(
                "pose spline must be 6-dimensional, got {}",
                spline.dim()
            )));
        }
        Ok(Self { spline })
    }

    pub fn spline(&self) -> &VectorSpline {
        &self.spline
    }

    pub fn spline_mut(&mut self) -> &mut VectorSpline {
        &mut self.spline
    }

    pub fn into_spline(self) -> VectorSpline {
        self.spline
    }

    pub fn domain(&self) -> (f64, f64) {
        self.spline.domain()
    }

    pub fn kinematics(&self, t: f64) -> Result<PoseKinematics> {
        let [w0, w1, w2] = self.spline.weights_upto::<3>(t)?;
        let mut v = [[0.0; 6]; 3];
        self.spline.combine(&w0, &mut v[0]);
        self.spline.combine(&w1, &mut v[1]);
        self.spline.combine(&w2, &mut v[2]);
        let head = |x: &[f64; 6]| Vector3::new(x[0], x[1], x[2]);
        let tail = |x: &[f64; 6]| Vector3::new(x[3], x[4], x[5]);
        Ok(PoseKinematics {
            phi: head(&v[0]),
            phi_dot: head(&v[1]),
            phi_ddot: head(&v[2]),
            position: tail(&v[0]),
            velocity: tail(&v[1]),
            acceleration: tail(&v[2]),
        })
    }

    /// `T_WI(t)`.
    pub fn pose_at(&self, t: f64) -> Result<RigidTransform> {
        let mut v = [0.0; 6];
        self.spline.evaluate_into(t, 0, &mut v)?;
        Ok(RigidTransform::from_angle_axis(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        ))
    }

    /// Body-frame angular rate `J_r(φ) φ̇`.
    pub fn angular_rate(&self, t: f64) -> Result<Vector3<f64>> {
        let k = self.kinematics(t)?;
        Ok(right_jacobian(&k.phi) * k.phi_dot)
    }
}

/// Estimation error of `estimate` against `reference`: rotation angle of
/// `Rᵀ R̄` in degrees and `‖Rᵀ(p̄ - p)‖` in meters.
pub fn extrinsic_error(reference: &RigidTransform, estimate: &RigidTransform) -> (f64, f64) {
    let rt = reference.rotation.matrix().transpose();
    let delta_r = rt * estimate.rotation.matrix();
    let delta_p = rt * (estimate.translation - reference.translation);
    (log_so3(&delta_r).norm().to_degrees(), delta_p.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::{fit_least_squares, KnotGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn exp_basic_cases() {
        assert_eq!(exp_so3(&Vector3::zeros()), Matrix3::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, PI / 2.0));
        let y = r * Vector3::x();
        assert!((y - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn log_of_identity_and_half_turn() {
        assert_eq!(log_so3(&Matrix3::identity()), Vector3::zeros());
        let r = exp_so3(&Vector3::new(0.0, 0.0, PI));
        let phi = log_so3(&r);
        assert!((phi - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12, "{phi}");
        let r = exp_so3(&Vector3::new(0.0, -PI, 0.0));
        let phi = log_so3(&r);
        assert!((phi.abs() - Vector3::new(0.0, PI, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..2000 {
            let scale = if i % 3 == 0 { 1e-6 } else { 1.8 };
            let mut phi = random_vec(&mut rng, scale);
            if phi.norm() >= PI {
                phi *= 3.1 / phi.norm();
            }
            let back = log_so3(&exp_so3(&phi));
            assert!((back - phi).norm() < 1e-10, "{phi} -> {back}");
        }
        // near π, the log may choose the opposite axis but the rotation is the same
        for _ in 0..200 {
            let axis = random_vec(&mut rng, 1.0).normalize();
            let phi = axis * (PI - rng.random_range(0.0..1e-3));
            let r = exp_so3(&phi);
            assert!((exp_so3(&log_so3(&r)) - r).abs().max() < 1e-9);
        }
    }

    #[test]
    fn right_jacobian_matches_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..200 {
            let phi = random_vec(&mut rng, if i % 2 == 0 { 0.05 } else { 2.0 });
            let jr = right_jacobian(&phi);
            let r = exp_so3(&phi);
            let h = 1e-6;
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = h;
                let rp = exp_so3(&(phi + e));
                let rm = exp_so3(&(phi - e));
                let fd = (log_so3(&(r.transpose() * rp)) - log_so3(&(r.transpose() * rm))) / (2.0 * h);
                assert!((fd - jr.column(c)).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn jacobian_product_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..200 {
            let phi = random_vec(&mut rng, if i % 2 == 0 { 0.08 } else { 2.5 });
            let v = random_vec(&mut rng, 2.0);
            let d = right_jacobian_product_derivative(&phi, &v);
            let h = 1e-6;
            for c in 0..3 {
                let mut e = Vector3::zeros();
                e[c] = h;
                let fd = (right_jacobian(&(phi + e)) * v - right_jacobian(&(phi - e)) * v) / (2.0 * h);
                assert!((fd - d.column(c)).norm() < 1e-7 * (1.0 + fd.norm()));
            }
        }
    }

    #[test]
    fn continuity_through_pi() {
        let raw = vec![Vector3::new(0.0, 0.0, 3.1), Vector3::new(0.0, 0.0, -3.1)];
        let out = enforce_continuity(&raw);
        assert!((out[1] - Vector3::new(0.0, 0.0, 2.0 * PI - 3.1)).norm() < 1e-12);

        let smooth: Vec<_> = (0..50).map(|i| Vector3::new(0.01 * i as f64, 0.2, -0.1)).collect();
        assert_eq!(enforce_continuity(&smooth), smooth);

        let constant = vec![Vector3::new(0.4, -1.0, 0.3); 100];
        assert_eq!(enforce_continuity(&constant), constant);
    }

    #[test]
    fn continuity_preserves_rotations() {
        // spin about a tilted axis through several full turns
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let raw: Vec<_> = (0..400)
            .map(|i| log_so3(&exp_so3(&(axis * (0.05 * i as f64)))))
            .collect();
        let out = enforce_continuity(&raw);
        for (a, b) in raw.iter().zip(&out) {
            assert!((exp_so3(a) - exp_so3(b)).abs().max() < 1e-9);
        }
        for w in out.windows(2) {
            assert!((w[1] - w[0]).norm() < PI);
        }
        assert!((out[399] - axis * (0.05 * 399.0)).norm() < 1e-9);
    }

    #[test]
    fn extrinsic_error_examples() {
        let reference = RigidTransform::from_angle_axis(Vector3::new(0.2, -0.4, 1.0), Vector3::new(0.1, 0.0, -0.05));
        assert_eq!(extrinsic_error(&reference, &reference), (0.0, 0.0));

        let tweak = Rotation::from_angle_axis(&(Vector3::new(1.0, 2.0, -0.5).normalize() * 1f64.to_radians()));
        let estimate = RigidTransform::new(reference.rotation.compose(&tweak), reference.translation);
        let (angle, trans) = extrinsic_error(&reference, &estimate);
        assert!((angle - 1.0).abs() < 1e-9 && trans == 0.0);

        let shifted = RigidTransform::new(
            reference.rotation,
            reference.translation + reference.rotation.rotate(&Vector3::new(0.003, 0.004, 0.0)),
        );
        let (angle, trans) = extrinsic_error(&reference, &shifted);
        assert!(angle.abs() < 1e-9 && (trans - 0.005).abs() < 1e-12);
    }

    #[test]
    fn zero_spline_is_identity() {
        let knots = KnotGrid::new(0.0, 0.1, 20).unwrap();
        let view = PoseSplineView::new(VectorSpline::zeros(6, 6, knots).unwrap()).unwrap();
        let (a, b) = view.domain();
        for i in 0..10 {
            let t = a + (b - a) * i as f64 / 9.0;
            let pose = view.pose_at(t).unwrap();
            assert_eq!(pose, RigidTransform::identity());
        }
    }

    #[test]
    fn fitted_constant_pose() {
        let phi = Vector3::new(0.3, -1.2, 0.7);
        let p = Vector3::new(1.0, 2.0, -0.5);
        let samples: Vec<(f64, Vec<f64>)> = (0..=40)
            .map(|i| (i as f64 * 0.05, vec![phi.x, phi.y, phi.z, p.x, p.y, p.z]))
            .collect();
        let knots = KnotGrid::covering(0.0, 2.0, 0.1, 6).unwrap();
        let view = PoseSplineView::new(fit_least_squares(&samples, 6, knots, 1e-6).unwrap()).unwrap();
        let expected = RigidTransform::from_angle_axis(phi, p);
        for (t, _) in samples {
            let pose = view.pose_at(t).unwrap();
            assert!((pose.rotation.matrix() - expected.rotation.matrix()).abs().max() < 1e-10);
            assert!((pose.translation - expected.translation).norm() < 1e-10);
        }
    }

    #[test]
    fn single_axis_angular_rate() {
        let knots = KnotGrid::new(0.0, 0.1, 30).unwrap();
        let samples: Vec<(f64, Vec<f64>)> = (0..=300)
            .map(|i| {
                let t = i as f64 * 0.01;
                (t, vec![0.0, 0.0, 0.8 * t, 0.0, 0.0, 0.0])
            })
            .filter(|(t, _)| *t >= knots.valid_domain(6).0 && *t <= knots.valid_domain(6).1)
            .collect();
        let view = PoseSplineView::new(fit_least_squares(&samples, 6, knots, 0.0).unwrap()).unwrap();
        let (a, b) = view.domain();
        let w = view.angular_rate(0.5 * (a + b)).unwrap();
        assert!((w - Vector3::new(0.0, 0.0, 0.8)).norm() < 1e-9);
    }

    proptest! {
        #[test]
        fn extrinsic_error_is_left_invariant(
            a in proptest::array::uniform3(-2.0f64..2.0),
            b in proptest::array::uniform3(-2.0f64..2.0),
            c in proptest::array::uniform3(-2.0f64..2.0),
            ta in proptest::array::uniform3(-1.0f64..1.0),
            tb in proptest::array::uniform3(-1.0f64..1.0),
            tc in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let reference = RigidTransform::from_angle_axis(Vector3::from(a), Vector3::from(ta));
            let estimate = RigidTransform::from_angle_axis(Vector3::from(b), Vector3::from(tb));
            let left = RigidTransform::from_angle_axis(Vector3::from(c), Vector3::from(tc));
            let e0 = extrinsic_error(&reference, &estimate);
            let e1 = extrinsic_error(&left.compose(&reference), &left.compose(&estimate));
            prop_assert!((e0.0 - e1.0).abs() < 1e-9);
            prop_assert!((e0.1 - e1.1).abs() < 1e-12);
        }

        #[test]
        fn rotation_round_trip(a in proptest::array::uniform3(-1.0f64..1.0)) {
            let r = Rotation::from_angle_axis(&(Vector3::from(a) * 2.5));
            let back = Rotation::from_angle_axis(&r.angle_axis());
            prop_assert!((back.matrix() - r.matrix()).abs().max() < 1e-9);
        }
    }
}
