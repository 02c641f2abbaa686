//! Starting values: per-frame target poses, a fitted trajectory, the clock
//! offset from gyro/camera rate correlation, and the gravity direction.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, SMatrix, SymmetricEigen, Vector2, Vector3, Vector6};

use crate::camera::{project_with_jacobian, unproject, CameraTemporal, Intrinsics, Observation};
use crate::error::{Error, Result};
use crate::geometry::{enforce_continuity, exp_so3, hat, log_so3, PoseSplineView, RigidTransform, Rotation};
use crate::imu::{GravityState, ImuSample};
use crate::splines::{fit_least_squares, KnotGrid};

use super::CalibrationConfig;

const MIN_FRAMES: usize = 20;
const PNP_ITERATIONS: usize = 10;

/// Camera pose of one frame recovered from its target observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePose {
    pub frame_id: u64,
    /// Capture time of the mean observed row.
    pub time: f64,
    /// `T_CW`.
    pub camera_from_world: RigidTransform,
    pub rms_px: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryInit {
    pub trajectory: PoseSplineView,
    pub frames: Vec<FramePose>,
}

impl TrajectoryInit {
    /// Refits the IMU trajectory from the stored frame poses with another `T_CI`.
    pub fn refit(&self, extrinsic: &RigidTransform, config: &CalibrationConfig) -> Result<Self> {
        Ok(Self {
            trajectory: fit_imu_trajectory(&self.frames, extrinsic, config)?,
            frames: self.frames.clone(),
        })
    }
}

fn normalizing_transform(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

/// Homography mapping target-plane `(x, y, 1)` to normalized image coordinates.
fn homography(plane: &[Vector2<f64>], image: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    let tp = normalizing_transform(plane);
    let ti = normalizing_transform(image);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (x, m) in plane.iter().zip(image) {
        let a = tp * Vector3::new(x.x, x.y, 1.0);
        let b = ti * Vector3::new(m.x, m.y, 1.0);
        let r1 = SMatrix::<f64, 1, 9>::from_row_slice(&[
            a.x, a.y, 1.0, 0.0, 0.0, 0.0, -b.x * a.x, -b.x * a.y, -b.x,
        ]);
        let r2 = SMatrix::<f64, 1, 9>::from_row_slice(&[
            0.0, 0.0, 0.0, a.x, a.y, 1.0, -b.y * a.x, -b.y * a.y, -b.y,
        ]);
        ata += r1.transpose() * r1 + r2.transpose() * r2;
    }
    let eig = SymmetricEigen::new(ata);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine eigenvalues");
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("image points coincide".into()))?;
    Ok(ti_inv * hn * tp)
}

fn is_collinear(plane: &[Vector2<f64>]) -> bool {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<Vector2<f64>>() / n;
    let cov = plane
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<nalgebra::Matrix2<f64>>()
        / n;
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    !(hi > 0.0) || lo < 1e-8 * hi
}

/// `T_CW` of a camera observing points on the `z = 0` target plane, and the
/// RMS reprojection error in pixels after refinement.
pub fn planar_pose(
    points: &[(Vector3<f64>, Vector2<f64>)],
    intrinsics: &Intrinsics,
) -> Result<(RigidTransform, f64)> {
    if points.len() < 4 {
        return Err(Error::InsufficientData(format!("{} points, need at least 4", points.len())));
    }
    if points.iter().any(|(l, _)| l.z.abs() > 1e-9) {
        return Err(Error::Argument("landmarks must lie on the z = 0 plane".into()));
    }
    let plane: Vec<_> = points.iter().map(|(l, _)| Vector2::new(l.x, l.y)).collect();
    if is_collinear(&plane) {
        return Err(Error::Degenerate("target points are collinear".into()));
    }
    let image = points
        .iter()
        .map(|(_, px)| {
            let b = unproject(intrinsics, px)?;
            if b.z <= 1e-6 {
                return Err(Error::Degenerate("bearing beyond 90 degrees".into()));
            }
            Ok(Vector2::new(b.x / b.z, b.y / b.z))
        })
        .collect::<Result<Vec<_>>>()?;
    let h = homography(&plane, &image)?;
    let (h1, h2, h3) = (h.column(0).into_owned(), h.column(1).into_owned(), h.column(2).into_owned());
    let mut scale = 2.0 / (h1.norm() + h2.norm());
    if h3.z * scale < 0.0 {
        scale = -scale;
    }
    let r1 = h1 * scale;
    let r2 = h2 * scale;
    let r = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let mut rotation = Rotation::orthonormalized(&r);
    let mut translation = h3 * scale;

    let residuals = |rotation: &Rotation, translation: &Vector3<f64>| -> Result<Vec<(Vector2<f64>, nalgebra::Matrix2x3<f64>, Vector3<f64>)>> {
        points
            .iter()
            .map(|(l, px)| {
                let rl = rotation.matrix() * l;
                let (p, j) = project_with_jacobian(intrinsics, &(rl + translation))?;
                Ok((p - px, j, rl))
            })
            .collect()
    };
    for _ in 0..PNP_ITERATIONS {
        let res = residuals(&rotation, &translation)?;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (r, j, rl) in &res {
            let mut jac = SMatrix::<f64, 2, 6>::zeros();
            jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-(j * hat(rl))));
            jac.fixed_view_mut::<2, 3>(0, 3).copy_from(j);
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * r;
        }
        let Some(step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else {
            break;
        };
        let d_rot = Vector3::new(step[0], step[1], step[2]);
        rotation = Rotation::orthonormalized(&(exp_so3(&d_rot) * rotation.matrix()));
        translation += Vector3::new(step[3], step[4], step[5]);
        if step.norm() < 1e-14 {
            break;
        }
    }
    let res = residuals(&rotation, &translation)?;
    let rms = (res.iter().map(|(r, _, _)| r.norm_squared()).sum::<f64>() / res.len() as f64).sqrt();
    Ok((RigidTransform::new(rotation, translation), rms))
}

fn fit_imu_trajectory(
    frames: &[FramePose],
    extrinsic: &RigidTransform,
    config: &CalibrationConfig,
) -> Result<PoseSplineView> {
    let poses: Vec<RigidTransform> = frames
        .iter()
        .map(|f| f.camera_from_world.inverse().compose(extrinsic))
        .collect();
    let raw: Vec<_> = poses.iter().map(|p| log_so3(p.rotation.matrix())).collect();
    let phis = enforce_continuity(&raw);
    let samples: Vec<(f64, Vec<f64>)> = frames
        .iter()
        .zip(poses.iter().zip(&phis))
        .map(|(f, (pose, phi))| {
            let p = pose.translation;
            (f.time, vec![phi.x, phi.y, phi.z, p.x, p.y, p.z])
        })
        .collect();
    let order = config.spline_order;
    let dt = 1.0 / config.pose_knot_rate_hz;
    // One knot interval of slack for temporal drift; a wider margin leaves
    // control points touched only by vanishing basis tails.
    let pad = dt;
    let first = samples.first().map(|s| s.0).unwrap_or(0.0);
    let last = samples.last().map(|s| s.0).unwrap_or(0.0);
    let knots = KnotGrid::covering(first - pad, last + pad, dt, order)?;
    PoseSplineView::new(fit_least_squares(&samples, order, knots, config.trajectory_smoothing)?)
}

/// Fits an IMU trajectory to per-frame target poses.
///
/// Each frame is placed at the capture time of its mean observed row under
/// `temporal`; frames with fewer than four corners, collinear corners or a
/// refined RMS above `config.pnp_max_rms_px` are skipped.
pub fn initialize_trajectory(
    observations: &[Observation],
    intrinsics: &Intrinsics,
    landmarks: &[Vector3<f64>],
    config: &CalibrationConfig,
    temporal: &CameraTemporal,
    extrinsic: &RigidTransform,
) -> Result<TrajectoryInit> {
    let mut by_frame: BTreeMap<u64, Vec<&Observation>> = BTreeMap::new();
    for o in observations {
        by_frame.entry(o.frame_id).or_default().push(o);
    }
    let mut frames = Vec::new();
    for (frame_id, obs) in by_frame {
        let points = obs
            .iter()
            .map(|o| {
                landmarks
                    .get(o.landmark_id)
                    .map(|l| (*l, o.pixel))
                    .ok_or(Error::Index {
                        index: o.landmark_id,
                        len: landmarks.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let (pose, rms) = match planar_pose(&points, intrinsics) {
            Ok(r) => r,
            Err(Error::InsufficientData(_) | Error::Degenerate(_) | Error::BehindCamera { .. } | Error::NonConvergence(_)) => {
                log::debug!("frame {frame_id}: pose not recoverable, skipped");
                continue;
            }
            Err(e) => return Err(e),
        };
        if !(rms <= config.pnp_max_rms_px) {
            log::debug!("frame {frame_id}: pose RMS {rms:.2} px, skipped");
            continue;
        }
        let mean_row = obs.iter().map(|o| o.pixel.y).sum::<f64>() / obs.len() as f64;
        frames.push(FramePose {
            frame_id,
            time: temporal.observation_time(obs[0].frame_timestamp, mean_row, intrinsics.height),
            camera_from_world: pose,
            rms_px: rms,
        });
    }
    if frames.len() < MIN_FRAMES {
        return Err(Error::InsufficientData(format!(
            "{} usable frames, need at least {MIN_FRAMES}",
            frames.len()
        )));
    }
    frames.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(TrajectoryInit {
        trajectory: fit_imu_trajectory(&frames, extrinsic, config)?,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeOffsetEstimate {
    /// Seconds to add to camera timestamps to express them on the IMU clock.
    pub offset: f64,
    pub correlation: f64,
    /// Either signal was flat; `offset` is zero.
    pub degenerate: bool,
}

const CORRELATION_RATE_HZ: f64 = 100.0;
const CORRELATION_WINDOW_S: f64 = 0.2;
const MIN_OVERLAP_S: f64 = 5.0;

fn interpolate_gyro_norm(imu: &[ImuSample], t: f64) -> f64 {
    let i = imu.partition_point(|s| s.timestamp <= t).clamp(1, imu.len() - 1);
    let (a, b) = (&imu[i - 1], &imu[i]);
    let span = b.timestamp - a.timestamp;
    let w = if span > 0.0 { ((t - a.timestamp) / span).clamp(0.0, 1.0) } else { 0.0 };
    (1.0 - w) * a.gyro.norm() + w * b.gyro.norm()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let denom = (saa * sbb).sqrt();
    (saa / n > 1e-12 && sbb / n > 1e-12).then(|| sab / denom)
}

/// Lag between gyroscope rate magnitude and the trajectory's rate magnitude,
/// searched within ±0.2 s on a 100 Hz grid and refined by a parabola through
/// the correlation peak. The trajectory is on the camera clock.
pub fn initialize_time_offset(imu: &[ImuSample], trajectory: &PoseSplineView) -> Result<TimeOffsetEstimate> {
    if imu.len() < 2 {
        return Err(Error::InsufficientData("need IMU samples for time-offset initialization".into()));
    }
    let (dom_a, dom_b) = trajectory.domain();
    let start = imu[0].timestamp.max(dom_a + CORRELATION_WINDOW_S);
    let end = imu[imu.len() - 1].timestamp.min(dom_b - CORRELATION_WINDOW_S);
    if !(end - start >= MIN_OVERLAP_S) {
        return Err(Error::InsufficientData(format!(
            "camera and IMU overlap for {:.2} s, need {MIN_OVERLAP_S} s",
            (end - start).max(0.0)
        )));
    }
    let step = 1.0 / CORRELATION_RATE_HZ;
    let n = ((end - start) / step).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| start + i as f64 * step).collect();
    let gyro: Vec<f64> = grid.iter().map(|&t| interpolate_gyro_norm(imu, t)).collect();
    let max_lag = (CORRELATION_WINDOW_S * CORRELATION_RATE_HZ).round() as i64;
    let mut scores = Vec::with_capacity((2 * max_lag + 1) as usize);
    for lag in -max_lag..=max_lag {
        let shift = lag as f64 * step;
        let rates = grid
            .iter()
            // Clamped because `start - shift` may round past the domain edge.
            .map(|&t| trajectory.angular_rate((t - shift).clamp(dom_a, dom_b)).map(|w| w.norm()))
            .collect::<Result<Vec<_>>>()?;
        match pearson(&gyro, &rates) {
            Some(c) => scores.push(c),
            None => {
                return Ok(TimeOffsetEstimate {
                    offset: 0.0,
                    correlation: 0.0,
                    degenerate: true,
                })
            }
        }
    }
    let (best, &peak) = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty lag range");
    let mut offset = (best as i64 - max_lag) as f64 * step;
    if best > 0 && best + 1 < scores.len() {
        let (l, c, r) = (scores[best - 1], peak, scores[best + 1]);
        let curvature = l - 2.0 * c + r;
        if curvature < 0.0 {
            offset += step * 0.5 * (l - r) / curvature;
        }
    }
    Ok(TimeOffsetEstimate {
        offset,
        correlation: peak,
        degenerate: false,
    })
}

/// `R_CI` minimizing `Σ ‖ω_C − R_CI ω_I‖²` between the rates of a camera
/// trajectory (`T_CI = I`, camera clock) and the gyroscope.
pub fn align_camera_rotation(imu: &[ImuSample], camera_trajectory: &PoseSplineView, time_offset: f64) -> Result<Rotation> {
    let mut m = Matrix3::zeros();
    let mut used = 0usize;
    for s in imu {
        let Ok(omega_c) = camera_trajectory.angular_rate(s.timestamp - time_offset) else {
            continue;
        };
        m += omega_c * s.gyro.transpose();
        used += 1;
    }
    if used < 10 {
        return Err(Error::InsufficientData(format!("{used} gyro samples overlap the camera trajectory")));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > 1e-6 * sv[0]) {
        return Err(Error::Degenerate("rotation about fewer than two axes; camera-IMU rotation unobservable".into()));
    }
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * v_t).determinant().signum();
    Rotation::from_matrix(u * d * v_t)
}

/// Gravity direction from the mean of `p̈ − R_WI a_m` over the IMU samples in the trajectory domain.
pub fn initialize_gravity(imu: &[ImuSample], trajectory: &PoseSplineView, magnitude: f64) -> Result<GravityState> {
    let mut sum = Vector3::zeros();
    let mut used = 0usize;
    for s in imu {
        let Ok(k) = trajectory.kinematics(s.timestamp) else {
            continue;
        };
        sum += k.acceleration - exp_so3(&k.phi) * s.accel;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InsufficientData("no IMU samples inside the trajectory domain".into()));
    }
    GravityState::new(sum / used as f64, magnitude)
}
