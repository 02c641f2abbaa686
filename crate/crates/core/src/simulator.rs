//! Synthetic rolling-shutter target observations and IMU streams with known
//! ground truth.
//!
//! Row `v` of the frame whose first row starts at camera time `s` is captured
//! at IMU time `s + t_IC + v·d`. Which row the stored frame timestamp refers to
//! follows the timestamp convention.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{project, Intrinsics, Observation, TimestampConvention};
use crate::error::{Error, Result};
use crate::estimator::CalibratedParameters;
use crate::geometry::{enforce_continuity, exp_so3, log_so3, PoseSplineView, RigidTransform, Rotation};
use crate::imu::{GravityState, ImuIntrinsics, ImuNoise, ImuSample};
use crate::splines::{fit_least_squares, KnotGrid};
use crate::target::TargetSpec;

/// Line delays of a 1650-pixel line clocked at 12, 20, 32 and 40 MHz.
pub const LINE_DELAY_SWEEP: [f64; 4] = [137.5e-6, 82.5e-6, 51.563e-6, 41.25e-6];

const FIXED_POINT_TOLERANCE: f64 = 1e-9;
const FIXED_POINT_MAX_ITERATIONS: usize = 10;
/// Stream id of the IMU noise generator; frames use their index.
const IMU_STREAM: u64 = 1 << 48;

const TRAJECTORY_ORDER: usize = 6;
const TRAJECTORY_KNOT_DT: f64 = 0.05;
const TRAJECTORY_SAMPLE_RATE_HZ: f64 = 200.0;
/// Trajectory margin beyond `[0, duration]`, seconds.
const TRAJECTORY_MARGIN: f64 = 1.0;
const STANDOFF_M: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Figure8,
    RandomSmooth,
}

/// Camera with a mild equidistant distortion, 752 × 480.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fu: 460.0,
        fv: 458.0,
        cu: 376.0,
        cv: 240.0,
        k1: -0.012,
        k2: 0.004,
        k3: -0.001,
        k4: 0.0002,
        width: 752,
        height: 480,
    }
}

/// `T_CI` of a camera mounted a few centimeters from the IMU, rotated by about 90°.
pub fn default_extrinsic() -> RigidTransform {
    RigidTransform::from_angle_axis(
        Vector3::new(0.02, -0.03, std::f64::consts::FRAC_PI_2 + 0.01),
        Vector3::new(0.05, -0.02, 0.01),
    )
}

pub fn default_gravity() -> GravityState {
    GravityState::standard(Vector3::new(0.05, 0.99, -0.1)).expect("nonzero direction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub duration: f64,
    pub frame_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub line_delay: f64,
    pub time_offset: f64,
    /// `T_CI`.
    pub extrinsic: RigidTransform,
    pub gravity: GravityState,
    pub noise: ImuNoise,
    /// Pixel noise standard deviation; 0 disables it.
    pub sigma_c: f64,
    pub target: TargetSpec,
    pub intrinsics: Intrinsics,
    /// IMU trajectory `T_WI(t)` on the IMU clock.
    pub trajectory: PoseSplineView,
    pub rng_seed: u64,
    pub timestamp_convention: TimestampConvention,
    pub imu_intrinsics: ImuIntrinsics,
    pub initial_gyro_bias: Vector3<f64>,
    pub initial_accel_bias: Vector3<f64>,
    /// Disables IMU white noise and bias random walks.
    pub imu_noise_free: bool,
}

impl SimulationSpec {
    /// 50 s figure-8 with ADIS16448-level IMU noise and 1 px corner noise.
    pub fn desk_scale(line_delay: f64, seed: u64) -> Result<Self> {
        let extrinsic = default_extrinsic();
        let target = TargetSpec::aprilgrid_6x6();
        let duration = 50.0;
        Ok(Self {
            duration,
            frame_rate_hz: 20.0,
            imu_rate_hz: 200.0,
            line_delay,
            time_offset: 0.005,
            extrinsic,
            gravity: default_gravity(),
            noise: ImuNoise::adis16448(200.0),
            sigma_c: 1.0,
            target,
            intrinsics: default_intrinsics(),
            trajectory: reference_trajectory(TrajectoryKind::Figure8, duration, seed, &extrinsic, &target)?,
            rng_seed: seed,
            timestamp_convention: TimestampConvention::CentralRow,
            imu_intrinsics: ImuIntrinsics::calibrated(),
            initial_gyro_bias: Vector3::new(0.002, -0.001, 0.0015),
            initial_accel_bias: Vector3::new(0.03, -0.02, 0.05),
            imu_noise_free: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("duration", self.duration),
            ("frame_rate_hz", self.frame_rate_hz),
            ("imu_rate_hz", self.imu_rate_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.line_delay >= 0.0) || !(self.sigma_c >= 0.0) {
            return Err(Error::Config("line delay and pixel noise must be non-negative".into()));
        }
        self.noise.validate()?;
        self.target.validate()?;
        self.intrinsics.validate()?;
        self.imu_intrinsics.validate()?;
        let (a, b) = self.trajectory.domain();
        let readout = self.line_delay * self.intrinsics.height as f64;
        if a > self.time_offset.min(0.0) || b < self.duration + self.time_offset.max(0.0) + readout {
            return Err(Error::Config(format!(
                "trajectory domain [{a}, {b}] does not cover the {} s simulation",
                self.duration
            )));
        }
        Ok(())
    }

    fn reference_row(&self) -> f64 {
        match self.timestamp_convention {
            TimestampConvention::FirstRow => 0.0,
            TimestampConvention::CentralRow => self.intrinsics.height as f64 / 2.0,
        }
    }

    pub fn num_frames(&self) -> usize {
        (self.duration * self.frame_rate_hz - 1e-9).ceil() as usize
    }

    pub fn ground_truth(&self) -> CalibratedParameters {
        CalibratedParameters {
            extrinsic: self.extrinsic,
            time_offset: self.time_offset,
            line_delay: self.line_delay,
            timestamp_convention: self.timestamp_convention,
            gravity: self.gravity,
            imu: self.imu_intrinsics,
        }
    }
}

fn look_at(position: &Vector3<f64>, target: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - position).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    Matrix3::from_columns(&[x, y, z])
}

/// Camera motion relative to the standoff point: translation offset and
/// attitude perturbation (angle-axis) on top of looking at the target centre.
type CameraMotion = dyn Fn(f64) -> (Vector3<f64>, Vector3<f64>);

fn figure8_motion(t: f64) -> (Vector3<f64>, Vector3<f64>) {
    use std::f64::consts::TAU;
    let offset = Vector3::new(
        0.5 * (TAU * 0.3 * t).sin(),
        0.3 * (TAU * 0.6 * t).sin(),
        -0.2 * (TAU * 0.43 * t).sin(),
    );
    let attitude = Vector3::new(
        0.1 * (TAU * 0.37 * t).sin(),
        0.33 * (TAU * 0.7 * t).sin(),
        0.3 * (TAU * 0.53 * t).sin(),
    );
    (offset, attitude)
}

fn random_smooth_motion(duration: f64, seed: u64) -> Result<Box<CameraMotion>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 0.5;
    let n = ((duration + 2.0 * TRAJECTORY_MARGIN + 2.0) / step).ceil() as usize + 1;
    let start = -TRAJECTORY_MARGIN - 1.0;
    let amplitude = [0.4, 0.3, 0.12, 0.12, 0.12, 0.5];
    let samples: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| {
            let values = amplitude.iter().map(|a| a * rng.random_range(-1.0..1.0)).collect();
            (start + i as f64 * step, values)
        })
        .collect();
    let end = start + (n - 1) as f64 * step;
    let knots = KnotGrid::covering(start, end, 2.0 * step, TRAJECTORY_ORDER)?;
    let spline = fit_least_squares(&samples, TRAJECTORY_ORDER, knots, 1e-3)?;
    Ok(Box::new(move |t| {
        let v = spline.evaluate(t, 0).expect("inside the padded domain");
        (Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }))
}

/// Smooth IMU trajectory `T_WI(t)` of a camera moving in front of `target`
/// at about 1.2 m, covering `[-1, duration + 1]`, as an order-6 spline with
/// 20 Hz knots.
pub fn reference_trajectory(
    kind: TrajectoryKind,
    duration: f64,
    seed: u64,
    extrinsic: &RigidTransform,
    target: &TargetSpec,
) -> Result<PoseSplineView> {
    if !(duration >= 10.0) {
        return Err(Error::Argument(format!("trajectory duration must be >= 10 s, got {duration}")));
    }
    target.validate()?;
    let motion: Box<CameraMotion> = match kind {
        TrajectoryKind::Figure8 => Box::new(figure8_motion),
        TrajectoryKind::RandomSmooth => random_smooth_motion(duration, seed)?,
    };
    let centre = target.center();
    let standoff = centre - Vector3::z() * STANDOFF_M;
    let start = -TRAJECTORY_MARGIN;
    let end = duration + TRAJECTORY_MARGIN;
    let n = ((end - start) * TRAJECTORY_SAMPLE_RATE_HZ).round() as usize + 1;
    let mut times = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut raw_phi = Vec::with_capacity(n);
    for i in 0..n {
        let t = (start + i as f64 / TRAJECTORY_SAMPLE_RATE_HZ).min(end);
        let (offset, attitude) = motion(t);
        let p_wc = standoff + offset;
        let r_wc = look_at(&p_wc, &centre) * exp_so3(&attitude);
        let camera = RigidTransform::new(Rotation::orthonormalized(&r_wc), p_wc);
        let imu = camera.compose(extrinsic);
        times.push(t);
        positions.push(imu.translation);
        raw_phi.push(log_so3(imu.rotation.matrix()));
    }
    let phis = enforce_continuity(&raw_phi);
    let samples: Vec<(f64, Vec<f64>)> = times
        .iter()
        .zip(phis.iter().zip(&positions))
        .map(|(t, (phi, p))| (*t, vec![phi.x, phi.y, phi.z, p.x, p.y, p.z]))
        .collect();
    let knots = KnotGrid::covering(start, end, TRAJECTORY_KNOT_DT, TRAJECTORY_ORDER)?;
    PoseSplineView::new(fit_least_squares(&samples, TRAJECTORY_ORDER, knots, 0.0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedObservations {
    pub observations: Vec<Observation>,
    /// True IMU-clock capture time of each observation.
    pub capture_times: Vec<f64>,
    /// Landmarks whose timing iteration did not converge.
    pub skipped: usize,
    /// Timing iterations used, one entry per converged landmark.
    pub iterations: Vec<u8>,
}

/// Projects `l` with the pose at IMU time `t`.
fn project_at(spec: &SimulationSpec, l: &Vector3<f64>, t: f64) -> Option<Vector2<f64>> {
    let t_wi = spec.trajectory.pose_at(t).ok()?;
    let point_c = spec.extrinsic.transform_point(&t_wi.inverse().transform_point(l));
    project(&spec.intrinsics, &point_c).ok()
}

struct FrameOutput {
    observations: Vec<Observation>,
    capture_times: Vec<f64>,
    iterations: Vec<u8>,
    skipped: usize,
}

fn simulate_frame(spec: &SimulationSpec, frame: usize, landmarks: &[(usize, Vector3<f64>)]) -> FrameOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(frame as u64);
    let first_row = frame as f64 / spec.frame_rate_hz;
    let stamp = first_row + spec.reference_row() * spec.line_delay;
    let base = first_row + spec.time_offset;
    let mid = spec.intrinsics.height as f64 / 2.0;
    let mut out = FrameOutput {
        observations: Vec::new(),
        capture_times: Vec::new(),
        iterations: Vec::new(),
        skipped: 0,
    };
    for (id, l) in landmarks {
        // Secant-accelerated iteration of t ↦ base + row(t)·d.
        let map = |t: f64| project_at(spec, l, t).map(|px| base + px.y * spec.line_delay);
        let mut t = base + mid * spec.line_delay;
        let mut previous: Option<(f64, f64)> = None;
        let mut solved = None;
        for iteration in 1..=FIXED_POINT_MAX_ITERATIONS {
            let Some(mapped) = map(t) else {
                break;
            };
            let gap = mapped - t;
            let next = match previous {
                Some((tp, gp)) if gap != gp => t - gap * (t - tp) / (gap - gp),
                _ => mapped,
            };
            previous = Some((t, gap));
            if (next - t).abs() < FIXED_POINT_TOLERANCE {
                solved = project_at(spec, l, next).map(|px| (px, next, iteration));
                break;
            }
            t = next;
        }
        let Some((px, t, iteration)) = solved else {
            if project_at(spec, l, t).is_some() {
                out.skipped += 1;
            }
            continue;
        };
        if !spec.intrinsics.contains(&px) {
            continue;
        }
        let noisy = if spec.sigma_c > 0.0 {
            let n: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            px + Vector2::new(n[0], n[1]) * spec.sigma_c
        } else {
            px
        };
        if !spec.intrinsics.contains(&noisy) {
            continue;
        }
        out.observations.push(Observation {
            frame_id: frame as u64,
            frame_timestamp: stamp,
            landmark_id: *id,
            pixel: noisy,
        });
        out.capture_times.push(t);
        out.iterations.push(iteration as u8);
    }
    out
}

/// Noisy corner observations of every frame, solving the per-row capture
/// time by fixed-point iteration before noise is added.
pub fn simulate_observations(spec: &SimulationSpec) -> Result<SimulatedObservations> {
    spec.validate()?;
    let landmarks = spec.target.landmarks();
    let frames: Vec<FrameOutput> = (0..spec.num_frames())
        .into_par_iter()
        .map(|f| simulate_frame(spec, f, &landmarks))
        .collect();
    let mut out = SimulatedObservations {
        observations: Vec::new(),
        capture_times: Vec::new(),
        skipped: 0,
        iterations: Vec::new(),
    };
    for f in frames {
        out.observations.extend(f.observations);
        out.capture_times.extend(f.capture_times);
        out.iterations.extend(f.iterations);
        out.skipped += f.skipped;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedImu {
    pub samples: Vec<ImuSample>,
    /// True biases at each sample.
    pub gyro_bias: Vec<Vector3<f64>>,
    pub accel_bias: Vec<Vector3<f64>>,
}

/// IMU samples over `[0, duration)` on the IMU clock.
pub fn simulate_imu(spec: &SimulationSpec) -> Result<SimulatedImu> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream(IMU_STREAM);
    let rate = spec.imu_rate_hz;
    let noise = &spec.noise;
    let n = (spec.duration * rate - 1e-9).ceil() as usize;
    let scale = if spec.imu_noise_free { 0.0 } else { 1.0 };
    let white_a = Normal::new(0.0, scale * noise.sigma_a * rate.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let white_g = Normal::new(0.0, scale * noise.sigma_g * rate.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let walk_a = Normal::new(0.0, scale * noise.sigma_ba / rate.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let walk_g = Normal::new(0.0, scale * noise.sigma_bg / rate.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let draw = |d: &Normal<f64>, rng: &mut ChaCha8Rng| Vector3::new(d.sample(rng), d.sample(rng), d.sample(rng));

    let mut b_g = spec.initial_gyro_bias;
    let mut b_a = spec.initial_accel_bias;
    let intr = &spec.imu_intrinsics;
    let mut out = SimulatedImu {
        samples: Vec::with_capacity(n),
        gyro_bias: Vec::with_capacity(n),
        accel_bias: Vec::with_capacity(n),
    };
    for i in 0..n {
        let t = i as f64 / rate;
        let k = spec.trajectory.kinematics(t)?;
        let r = exp_so3(&k.phi);
        let a_s = r.transpose() * (k.acceleration - spec.gravity.vector());
        let omega = crate::geometry::right_jacobian(&k.phi) * k.phi_dot;
        let accel = intr.accel_matrix * a_s + b_a + draw(&white_a, &mut rng);
        let gyro = intr.gyro_matrix * omega + intr.g_sensitivity * a_s + b_g + draw(&white_g, &mut rng);
        out.samples.push(ImuSample {
            timestamp: t,
            gyro,
            accel,
        });
        out.gyro_bias.push(b_g);
        out.accel_bias.push(b_a);
        b_g += draw(&walk_g, &mut rng);
        b_a += draw(&walk_a, &mut rng);
    }
    Ok(out)
}
