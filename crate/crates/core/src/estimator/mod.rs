//! Joint estimation of the camera-IMU extrinsics, time offset, line delay,
//! gravity direction, IMU biases and the IMU trajectory.

mod init;
mod problem;
mod solve;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Observation, TimestampConvention};
use crate::error::{Error, Result};
use crate::geometry::{extrinsic_error, PoseSplineView, RigidTransform};
use crate::imu::{GravityState, ImuIntrinsics, ImuModelKind, ImuNoise, ImuSample, STANDARD_GRAVITY};
use crate::splines::{KnotGrid, VectorSpline, MAX_ORDER};

pub use init::{
    align_camera_rotation, initialize_gravity, initialize_time_offset, initialize_trajectory, planar_pose,
    FramePose, TimeOffsetEstimate, TrajectoryInit,
};
pub use problem::{assemble, BlockEval, BlockKind, CalibrationProblem, ParameterLayout};
pub use solve::{solve, solve_with_progress};

/// Initial camera-from-IMU transform supplied by the user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicGuess {
    pub rotation_angle_axis: [f64; 3],
    pub translation: [f64; 3],
}

impl ExtrinsicGuess {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_angle_axis(Vector3::from(self.rotation_angle_axis), Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub spline_order: usize,
    pub pose_knot_rate_hz: f64,
    pub bias_knot_rate_hz: f64,
    pub imu_model: ImuModelKind,
    /// Reprojection noise, pixels.
    pub sigma_c: f64,
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub parameter_tolerance: f64,
    pub estimate_line_delay: bool,
    pub estimate_time_offset: bool,
    pub timestamp_convention: TimestampConvention,
    /// Starting line delay; the fixed value when it is not estimated.
    pub initial_line_delay: Option<f64>,
    /// Skips the cross-correlation initialization when set.
    pub initial_time_offset: Option<f64>,
    pub initial_extrinsic: Option<ExtrinsicGuess>,
    pub max_line_delay: f64,
    pub gravity_magnitude: f64,
    /// Huber loss of width `2 σ_c` on reprojection residuals.
    pub robust_loss: bool,
    /// Curvature weight of the initial trajectory fit.
    pub trajectory_smoothing: f64,
    pub pnp_max_rms_px: f64,
    /// Worker threads for residual evaluation; 0 uses all cores.
    pub threads: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            spline_order: 6,
            pose_knot_rate_hz: 100.0,
            bias_knot_rate_hz: 50.0,
            imu_model: ImuModelKind::Calibrated,
            sigma_c: 1.0,
            max_iterations: 50,
            function_tolerance: 1e-10,
            parameter_tolerance: 1e-12,
            estimate_line_delay: true,
            estimate_time_offset: true,
            timestamp_convention: TimestampConvention::FirstRow,
            initial_line_delay: None,
            initial_time_offset: None,
            initial_extrinsic: None,
            max_line_delay: 500e-6,
            gravity_magnitude: STANDARD_GRAVITY,
            robust_loss: false,
            trajectory_smoothing: 1e-6,
            pnp_max_rms_px: 5.0,
            threads: 1,
        }
    }
}

/// Default line delay when neither a value nor sensor specs are given.
pub const DEFAULT_LINE_DELAY: f64 = 30e-6;

impl CalibrationConfig {
    /// Lower knot rates for quick runs: pose 20 Hz, bias 5 Hz.
    pub fn desk_scale() -> Self {
        Self {
            pose_knot_rate_hz: 20.0,
            bias_knot_rate_hz: 5.0,
            ..Self::default()
        }
    }

    /// Global-shutter treatment: line delay frozen at zero.
    pub fn global_shutter(mut self) -> Self {
        self.estimate_line_delay = false;
        self.initial_line_delay = Some(0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=MAX_ORDER).contains(&self.spline_order) {
            return Err(Error::Config(format!(
                "spline_order must be in [4, {MAX_ORDER}], got {}",
                self.spline_order
            )));
        }
        for (name, v) in [
            ("pose_knot_rate_hz", self.pose_knot_rate_hz),
            ("bias_knot_rate_hz", self.bias_knot_rate_hz),
            ("sigma_c", self.sigma_c),
            ("gravity_magnitude", self.gravity_magnitude),
            ("pnp_max_rms_px", self.pnp_max_rms_px),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.function_tolerance >= 0.0 && self.parameter_tolerance >= 0.0) {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        if !(self.max_line_delay >= 0.0) {
            return Err(Error::Config(format!("max_line_delay must be >= 0, got {}", self.max_line_delay)));
        }
        if let Some(d) = self.initial_line_delay {
            if !(0.0..=self.max_line_delay).contains(&d) {
                return Err(Error::Config(format!(
                    "initial_line_delay {d} outside [0, {}]",
                    self.max_line_delay
                )));
            }
        }
        if !(self.trajectory_smoothing >= 0.0) {
            return Err(Error::Config("trajectory_smoothing must be >= 0".into()));
        }
        Ok(())
    }

    pub(crate) fn starting_line_delay(&self) -> f64 {
        match (self.initial_line_delay, self.estimate_line_delay) {
            (Some(d), _) => d,
            (None, true) => DEFAULT_LINE_DELAY,
            (None, false) => 0.0,
        }
    }
}

/// Every estimated quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    /// `T_CI`: maps IMU-frame points into the camera frame.
    pub extrinsic: RigidTransform,
    /// `t_IC`, seconds.
    pub time_offset: f64,
    /// Seconds per row.
    pub line_delay: f64,
    pub gravity: GravityState,
    pub pose: PoseSplineView,
    /// Rows 0–2 gyroscope bias, rows 3–5 accelerometer bias.
    pub bias: VectorSpline,
    pub imu: ImuIntrinsics,
}

impl ParameterBlock {
    /// Zero biases on a grid covering the pose-spline domain.
    pub fn with_zero_bias(
        extrinsic: RigidTransform,
        time_offset: f64,
        line_delay: f64,
        gravity: GravityState,
        pose: PoseSplineView,
        bias_knot_rate_hz: f64,
        imu: ImuIntrinsics,
    ) -> Result<Self> {
        let (start, end) = pose.domain();
        let order = pose.spline().order();
        let knots = KnotGrid::covering(start, end, 1.0 / bias_knot_rate_hz, order)?;
        let bias = VectorSpline::zeros(order, 6, knots)?;
        Ok(Self {
            extrinsic,
            time_offset,
            line_delay,
            gravity,
            pose,
            bias,
            imu,
        })
    }

    pub fn calibrated(&self, convention: TimestampConvention) -> CalibratedParameters {
        CalibratedParameters {
            extrinsic: self.extrinsic,
            time_offset: self.time_offset,
            line_delay: self.line_delay,
            timestamp_convention: convention,
            gravity: self.gravity,
            imu: self.imu,
        }
    }
}

/// Time-invariant calibration result; also the ground-truth schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedParameters {
    pub extrinsic: RigidTransform,
    pub time_offset: f64,
    pub line_delay: f64,
    pub timestamp_convention: TimestampConvention,
    pub gravity: GravityState,
    pub imu: ImuIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualStatistics {
    pub count: usize,
    /// Blocks outside a spline domain or behind the camera.
    pub dropped: usize,
    /// Median residual norm in measurement units (px, m/s², rad/s).
    pub median: f64,
    pub rms: f64,
    /// RMS of whitened residual components.
    pub whitened_rms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualSummary {
    pub reprojection: ResidualStatistics,
    pub accel: ResidualStatistics,
    pub gyro: ResidualStatistics,
    pub bias_prior: ResidualStatistics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FunctionTolerance,
    ParameterTolerance,
    MaxIterations,
    /// No cost-reducing step found even under heavy damping.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub parameters: ParameterBlock,
    pub timestamp_convention: TimestampConvention,
    pub statistics: ResidualSummary,
    pub diagnostics: SolverDiagnostics,
}

impl CalibrationReport {
    pub fn calibrated(&self) -> CalibratedParameters {
        self.parameters.calibrated(self.timestamp_convention)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub rotation_deg: f64,
    pub translation_m: f64,
    pub time_offset_s: f64,
    pub line_delay_s: f64,
    pub median_reprojection_px: Option<f64>,
}

/// Absolute errors of `estimate` against `reference`.
pub fn evaluate_parameters(estimate: &CalibratedParameters, reference: &CalibratedParameters) -> ErrorSummary {
    let (rotation_deg, translation_m) = extrinsic_error(&reference.extrinsic, &estimate.extrinsic);
    ErrorSummary {
        rotation_deg,
        translation_m,
        time_offset_s: (estimate.time_offset - reference.time_offset).abs(),
        line_delay_s: (estimate.line_delay - reference.line_delay).abs(),
        median_reprojection_px: None,
    }
}

pub fn evaluate_report(report: &CalibrationReport, reference: &CalibratedParameters) -> ErrorSummary {
    ErrorSummary {
        median_reprojection_px: Some(report.statistics.reprojection.median),
        ..evaluate_parameters(&report.calibrated(), reference)
    }
}

/// Inputs of a calibration run.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationData<'a> {
    pub observations: &'a [Observation],
    pub imu: &'a [ImuSample],
    pub intrinsics: &'a Intrinsics,
    /// Landmark coordinates indexed by id.
    pub landmarks: &'a [Vector3<f64>],
    pub noise: &'a ImuNoise,
}

/// Builds the starting point of the optimization from the data alone.
pub fn initialize(data: &CalibrationData<'_>, config: &CalibrationConfig) -> Result<ParameterBlock> {
    config.validate()?;
    let line_delay = config.starting_line_delay();
    let provisional = config
        .initial_extrinsic
        .map(|g| g.transform())
        .unwrap_or_else(RigidTransform::identity);
    let temporal = crate::camera::CameraTemporal {
        time_offset: 0.0,
        line_delay,
        convention: config.timestamp_convention,
    };
    let mut init = initialize_trajectory(
        data.observations,
        data.intrinsics,
        data.landmarks,
        config,
        &temporal,
        &provisional,
    )?;

    let time_offset = match config.initial_time_offset {
        Some(t) => t,
        None if config.estimate_time_offset => {
            let est = initialize_time_offset(data.imu, &init.trajectory)?;
            if est.degenerate {
                log::warn!("no rotational excitation; starting the time offset at 0");
            }
            est.offset
        }
        None => 0.0,
    };

    let extrinsic = match config.initial_extrinsic {
        Some(g) => g.transform(),
        None => {
            log::warn!("no initial extrinsic given; aligning camera and gyroscope rates for the rotation");
            let rotation = align_camera_rotation(data.imu, &init.trajectory, time_offset)?;
            let extrinsic = RigidTransform::new(rotation, Vector3::zeros());
            init = init.refit(&extrinsic, config)?;
            extrinsic
        }
    };

    let mut pose = init.trajectory;
    pose.spline_mut().shift_time(time_offset);
    let gravity = initialize_gravity(data.imu, &pose, config.gravity_magnitude)?;
    ParameterBlock::with_zero_bias(
        extrinsic,
        time_offset,
        line_delay,
        gravity,
        pose,
        config.bias_knot_rate_hz,
        ImuIntrinsics::with_model(config.imu_model),
    )
}

/// Initialization, assembly and optimization in one call.
pub fn calibrate(data: &CalibrationData<'_>, config: &CalibrationConfig) -> Result<CalibrationReport> {
    let initial = initialize(data, config)?;
    let problem = assemble(
        data.observations,
        data.imu,
        data.intrinsics,
        data.landmarks,
        data.noise,
        config,
        initial,
    )?;
    solve(problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, Rotation};
    use nalgebra::Matrix3;

    fn params(rot: Matrix3<f64>, p: Vector3<f64>) -> CalibratedParameters {
        CalibratedParameters {
            extrinsic: RigidTransform::new(Rotation::from_matrix(rot).unwrap(), p),
            time_offset: 0.005,
            line_delay: 40e-6,
            timestamp_convention: TimestampConvention::FirstRow,
            gravity: GravityState::standard(Vector3::new(0.0, 0.0, -1.0)).unwrap(),
            imu: ImuIntrinsics::calibrated(),
        }
    }

    /// Rotation angle from the trace and translation via explicit loops.
    fn scalar_error(reference: &CalibratedParameters, estimate: &CalibratedParameters) -> (f64, f64) {
        let a = reference.extrinsic.rotation.matrix();
        let b = estimate.extrinsic.rotation.matrix();
        let mut trace = 0.0;
        for i in 0..3 {
            for k in 0..3 {
                trace += a[(k, i)] * b[(k, i)];
            }
        }
        let angle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        let mut sq = 0.0;
        for i in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a[(k, i)] * (estimate.extrinsic.translation[k] - reference.extrinsic.translation[k]);
            }
            sq += s * s;
        }
        (angle, sq.sqrt())
    }

    #[test]
    fn identical_parameters_have_zero_error() {
        let p = params(exp_so3(&Vector3::new(0.1, -0.2, 1.4)), Vector3::new(0.05, 0.0, -0.02));
        let e = evaluate_parameters(&p, &p);
        assert_eq!(
            (e.rotation_deg, e.translation_m, e.time_offset_s, e.line_delay_s),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn error_matches_scalar_implementation() {
        let reference = params(
            Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            Vector3::new(0.0, -0.07, 0.01),
        );
        for (i, delta) in [
            Vector3::new(0.01, 0.0, 0.0),
            Vector3::new(-0.003, 0.02, 0.005),
            Vector3::new(0.3, -0.2, 0.1),
        ]
        .iter()
        .enumerate()
        {
            let rot = reference.extrinsic.rotation.matrix() * exp_so3(delta);
            let mut estimate = params(rot, Vector3::new(0.001 * i as f64, -0.069, 0.012));
            estimate.time_offset = 0.0052;
            let e = evaluate_parameters(&estimate, &reference);
            let (angle, trans) = scalar_error(&reference, &estimate);
            assert!((e.rotation_deg - angle).abs() < 1e-6, "{} vs {angle}", e.rotation_deg);
            assert!((e.rotation_deg - delta.norm().to_degrees()).abs() < 1e-9);
            assert!((e.translation_m - trans).abs() < 1e-12);
            assert!((e.time_offset_s - 0.0002).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(CalibrationConfig::default().validate().is_ok());
        let c = CalibrationConfig {
            spline_order: 3,
            ..CalibrationConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = CalibrationConfig {
            bias_knot_rate_hz: 0.0,
            ..CalibrationConfig::default()
        };
        assert!(c.validate().is_err());
        let gs = CalibrationConfig::desk_scale().global_shutter();
        assert_eq!(gs.starting_line_delay(), 0.0);
        assert_eq!(CalibrationConfig::default().starting_line_delay(), DEFAULT_LINE_DELAY);
    }

    #[test]
    fn config_parses_partial_toml() {
        let c: CalibrationConfig = toml::from_str("pose_knot_rate_hz = 20.0\nimu_model = \"scale_misalignment\"\n").unwrap();
        assert_eq!(c.pose_knot_rate_hz, 20.0);
        assert_eq!(c.imu_model, ImuModelKind::ScaleMisalignment);
        assert_eq!(c.spline_order, 6);
        assert!(toml::from_str::<CalibrationConfig>("unknown_key = 1").is_err());
    }
}
