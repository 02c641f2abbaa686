//! Interchange formats: corner and IMU CSV streams, TOML configuration, and
//! the TOML report that doubles as the ground-truth file.
//!
//! Floats are written in Rust's shortest round-trip notation, so reading a
//! file and writing it again reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Observation, TimestampConvention};
use crate::error::{Error, Result};
use crate::estimator::{
    CalibratedParameters, CalibrationReport, ErrorSummary, ResidualStatistics, ResidualSummary, Termination,
};
use crate::geometry::{RigidTransform, Rotation};
use crate::imu::{GravityState, ImuIntrinsics, ImuModelKind, ImuNoise, ImuSample};
use crate::simulator::{default_extrinsic, default_intrinsics, reference_trajectory, SimulationSpec, TrajectoryKind};
use crate::target::TargetSpec;

pub const OBSERVATION_HEADER: [&str; 5] = ["frame_id", "frame_timestamp_s", "landmark_id", "u_px", "v_px"];
pub const IMU_HEADER: [&str; 7] = ["timestamp_s", "gx", "gy", "gz", "ax", "ay", "az"];

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn read_records(path: &Path, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found = reader
        .headers()
        .map_err(|e| parse_error(path, format!("line 1: {e}")))?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(parse_error(
            path,
            format!("line 1: expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                format!("line {line}: expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        out.push((line, record));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, line: u64, record: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = &record[i];
    raw.parse()
        .map_err(|_| parse_error(path, format!("line {line}: cannot parse {name} from `{raw}`")))
}

fn finite(path: &Path, line: u64, x: f64, name: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(parse_error(path, format!("line {line}: {name} is not finite")))
    }
}

pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    read_records(path, &OBSERVATION_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            Ok(Observation {
                frame_id: field(path, line, &r, 0, "frame_id")?,
                frame_timestamp: finite(path, line, field(path, line, &r, 1, "frame_timestamp_s")?, "frame_timestamp_s")?,
                landmark_id: field(path, line, &r, 2, "landmark_id")?,
                pixel: Vector2::new(
                    finite(path, line, field(path, line, &r, 3, "u_px")?, "u_px")?,
                    finite(path, line, field(path, line, &r, 4, "v_px")?, "v_px")?,
                ),
            })
        })
        .collect()
}

pub fn format_observations(observations: &[Observation]) -> String {
    let mut out = OBSERVATION_HEADER.join(",");
    out.push('\n');
    for o in observations {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            o.frame_id, o.frame_timestamp, o.landmark_id, o.pixel.x, o.pixel.y
        );
    }
    out
}

pub fn write_observations(path: &Path, observations: &[Observation]) -> Result<()> {
    Ok(fs::write(path, format_observations(observations))?)
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    read_records(path, &IMU_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            let mut v = [0.0; 7];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = finite(path, line, field(path, line, &r, i, IMU_HEADER[i])?, IMU_HEADER[i])?;
            }
            Ok(ImuSample {
                timestamp: v[0],
                gyro: Vector3::new(v[1], v[2], v[3]),
                accel: Vector3::new(v[4], v[5], v[6]),
            })
        })
        .collect()
}

pub fn format_imu(samples: &[ImuSample]) -> String {
    let mut out = IMU_HEADER.join(",");
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.timestamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        );
    }
    out
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    Ok(fs::write(path, format_imu(samples))?)
}

/// IMU timestamps strictly increase; frames appear in increasing time order
/// and share one timestamp per frame id.
pub fn validate_streams(observations: &[Observation], imu: &[ImuSample]) -> Result<()> {
    if let Some(i) = imu.windows(2).position(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(Error::InsufficientData(format!(
            "IMU timestamps not strictly increasing at sample {}",
            i + 1
        )));
    }
    let mut last: Option<(u64, f64)> = None;
    for (i, o) in observations.iter().enumerate() {
        if let Some((id, t)) = last {
            let ok = if o.frame_id == id {
                o.frame_timestamp == t
            } else {
                o.frame_timestamp > t
            };
            if !ok {
                return Err(Error::InsufficientData(format!(
                    "observation {i}: frame {} at {} s breaks the frame time order",
                    o.frame_id, o.frame_timestamp
                )));
            }
        }
        last = Some((o.frame_id, o.frame_timestamp));
    }
    Ok(())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    parse_toml(path, &text)
}

pub fn parse_toml<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| parse_error(path, e.to_string()))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("serialization failed: {e}")))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, to_toml(value)?)?)
}

/// Noise densities plus the IMU model to calibrate with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_a: f64,
    pub sigma_ba: f64,
    pub sigma_g: f64,
    pub sigma_bg: f64,
    pub rate_hz: f64,
    #[serde(default)]
    pub model: ImuModelKind,
}

impl NoiseConfig {
    pub fn new(noise: ImuNoise, model: ImuModelKind) -> Self {
        Self {
            sigma_a: noise.sigma_a,
            sigma_ba: noise.sigma_ba,
            sigma_g: noise.sigma_g,
            sigma_bg: noise.sigma_bg,
            rate_hz: noise.rate_hz,
            model,
        }
    }

    pub fn noise(&self) -> ImuNoise {
        ImuNoise {
            sigma_a: self.sigma_a,
            sigma_ba: self.sigma_ba,
            sigma_g: self.sigma_g,
            sigma_bg: self.sigma_bg,
            rate_hz: self.rate_hz,
        }
    }
}

type Rows = [[f64; 3]; 3];

fn rows(m: &Matrix3<f64>) -> Rows {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn matrix(rows: &Rows) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicSection {
    /// Rows of `R_CI`.
    pub rotation: Rows,
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalSection {
    pub time_offset_s: f64,
    pub line_delay_s: f64,
    pub timestamp_convention: TimestampConvention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GravitySection {
    pub direction: [f64; 3],
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuSection {
    pub model: ImuModelKind,
    pub accel_matrix: Rows,
    pub gyro_matrix: Rows,
    pub g_sensitivity: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticsEntry {
    pub count: usize,
    pub dropped: usize,
    pub median: f64,
    pub rms: f64,
    pub whitened_rms: f64,
}

impl From<ResidualStatistics> for StatisticsEntry {
    fn from(s: ResidualStatistics) -> Self {
        Self {
            count: s.count,
            dropped: s.dropped,
            median: s.median,
            rms: s.rms,
            whitened_rms: s.whitened_rms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticsSection {
    pub reprojection_px: StatisticsEntry,
    pub accel_mps2: StatisticsEntry,
    pub gyro_radps: StatisticsEntry,
    pub bias_prior: StatisticsEntry,
}

impl From<ResidualSummary> for StatisticsSection {
    fn from(s: ResidualSummary) -> Self {
        Self {
            reprojection_px: s.reprojection.into(),
            accel_mps2: s.accel.into(),
            gyro_radps: s.gyro.into(),
            bias_prior: s.bias_prior.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    pub converged: bool,
}

/// Simulation settings recorded next to ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationNoiseSection {
    pub sigma_c_px: f64,
    pub sigma_a: f64,
    pub sigma_ba: f64,
    pub sigma_g: f64,
    pub sigma_bg: f64,
    pub imu_rate_hz: f64,
    pub seed: u64,
}

/// Calibration report / ground-truth file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub extrinsic: ExtrinsicSection,
    pub temporal: TemporalSection,
    pub gravity: GravitySection,
    pub imu: ImuSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistics: Option<StatisticsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<SimulationNoiseSection>,
}

impl ReportFile {
    pub fn from_parameters(p: &CalibratedParameters) -> Self {
        let g = p.gravity.direction();
        Self {
            extrinsic: ExtrinsicSection {
                rotation: rows(p.extrinsic.rotation.matrix()),
                translation: p.extrinsic.translation.into(),
            },
            temporal: TemporalSection {
                time_offset_s: p.time_offset,
                line_delay_s: p.line_delay,
                timestamp_convention: p.timestamp_convention,
            },
            gravity: GravitySection {
                direction: [g.x, g.y, g.z],
                magnitude: p.gravity.magnitude(),
            },
            imu: ImuSection {
                model: p.imu.model,
                accel_matrix: rows(&p.imu.accel_matrix),
                gyro_matrix: rows(&p.imu.gyro_matrix),
                g_sensitivity: rows(&p.imu.g_sensitivity),
            },
            statistics: None,
            diagnostics: None,
            noise: None,
        }
    }

    pub fn from_report(report: &CalibrationReport) -> Self {
        let d = &report.diagnostics;
        Self {
            statistics: Some(report.statistics.into()),
            diagnostics: Some(DiagnosticsSection {
                iterations: d.iterations,
                initial_cost: d.initial_cost,
                final_cost: d.final_cost,
                termination: d.termination,
                converged: d.converged,
            }),
            ..Self::from_parameters(&report.calibrated())
        }
    }

    pub fn from_simulation(spec: &SimulationSpec) -> Self {
        Self {
            noise: Some(SimulationNoiseSection {
                sigma_c_px: spec.sigma_c,
                sigma_a: spec.noise.sigma_a,
                sigma_ba: spec.noise.sigma_ba,
                sigma_g: spec.noise.sigma_g,
                sigma_bg: spec.noise.sigma_bg,
                imu_rate_hz: spec.imu_rate_hz,
                seed: spec.rng_seed,
            }),
            ..Self::from_parameters(&spec.ground_truth())
        }
    }

    pub fn parameters(&self) -> Result<CalibratedParameters> {
        let rotation = Rotation::from_matrix(matrix(&self.extrinsic.rotation))
            .map_err(|e| Error::Config(format!("extrinsic.rotation: {e}")))?;
        let imu = ImuIntrinsics {
            model: self.imu.model,
            accel_matrix: matrix(&self.imu.accel_matrix),
            gyro_matrix: matrix(&self.imu.gyro_matrix),
            g_sensitivity: matrix(&self.imu.g_sensitivity),
        };
        imu.validate()?;
        Ok(CalibratedParameters {
            extrinsic: RigidTransform::new(rotation, Vector3::from(self.extrinsic.translation)),
            time_offset: self.temporal.time_offset_s,
            line_delay: self.temporal.line_delay_s,
            timestamp_convention: self.temporal.timestamp_convention,
            gravity: GravityState::new(Vector3::from(self.gravity.direction), self.gravity.magnitude)?,
            imu,
        })
    }

    pub fn median_reprojection_px(&self) -> Option<f64> {
        self.statistics.map(|s| s.reprojection_px.median)
    }
}

/// `parameter,value` rows of a report.
pub fn summary_csv(report: &ReportFile) -> String {
    let mut out = String::from("parameter,value\n");
    let mut row = |name: &str, v: f64| {
        let _ = writeln!(out, "{name},{v}");
    };
    for r in 0..3 {
        for c in 0..3 {
            row(&format!("R_CI_{r}{c}"), report.extrinsic.rotation[r][c]);
        }
    }
    for (axis, v) in ["x", "y", "z"].iter().zip(report.extrinsic.translation) {
        row(&format!("p_CI_{axis}_m"), v);
    }
    row("time_offset_s", report.temporal.time_offset_s);
    row("line_delay_s", report.temporal.line_delay_s);
    for (axis, v) in ["x", "y", "z"].iter().zip(report.gravity.direction) {
        row(&format!("gravity_dir_{axis}"), v);
    }
    if report.imu.model == ImuModelKind::ScaleMisalignment {
        for (name, m) in [
            ("M_a", &report.imu.accel_matrix),
            ("M_g", &report.imu.gyro_matrix),
            ("M_s", &report.imu.g_sensitivity),
        ] {
            for r in 0..3 {
                for c in 0..3 {
                    row(&format!("{name}_{r}{c}"), m[r][c]);
                }
            }
        }
    }
    if let Some(s) = report.statistics {
        row("median_reprojection_px", s.reprojection_px.median);
        row("rms_reprojection_px", s.reprojection_px.rms);
    }
    out
}

pub const ERROR_HEADER: &str = "label,rotation_deg,translation_m,time_offset_ms,line_delay_us,median_reprojection_px";

/// One row of an evaluation table; a missing median prints as empty.
pub fn error_row(label: &str, e: &ErrorSummary) -> String {
    format!(
        "{label},{},{},{},{},{}",
        e.rotation_deg,
        e.translation_m,
        e.time_offset_s * 1e3,
        e.line_delay_s * 1e6,
        e.median_reprojection_px.map(|m| m.to_string()).unwrap_or_default()
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicConfig {
    pub rotation_angle_axis: [f64; 3],
    pub translation: [f64; 3],
}

/// TOML description of a simulation; omitted fields take the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub duration_s: f64,
    pub frame_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub line_delay_s: f64,
    pub time_offset_s: f64,
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    pub timestamp_convention: TimestampConvention,
    pub sigma_c_px: f64,
    pub sigma_a: f64,
    pub sigma_ba: f64,
    pub sigma_g: f64,
    pub sigma_bg: f64,
    pub imu_noise_free: bool,
    pub extrinsic: ExtrinsicConfig,
    pub gravity_direction: [f64; 3],
    pub accel_matrix: Option<Rows>,
    pub gyro_matrix: Option<Rows>,
    pub g_sensitivity: Option<Rows>,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    pub intrinsics: Intrinsics,
    pub target: TargetSpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let t = default_extrinsic();
        let noise = ImuNoise::adis16448(200.0);
        let g = crate::simulator::default_gravity();
        Self {
            duration_s: 50.0,
            frame_rate_hz: 20.0,
            imu_rate_hz: 200.0,
            line_delay_s: 137.5e-6,
            time_offset_s: 0.005,
            seed: 7,
            trajectory: TrajectoryKind::Figure8,
            timestamp_convention: TimestampConvention::CentralRow,
            sigma_c_px: 1.0,
            sigma_a: noise.sigma_a,
            sigma_ba: noise.sigma_ba,
            sigma_g: noise.sigma_g,
            sigma_bg: noise.sigma_bg,
            imu_noise_free: false,
            extrinsic: ExtrinsicConfig {
                rotation_angle_axis: t.rotation.angle_axis().into(),
                translation: t.translation.into(),
            },
            gravity_direction: (*g.direction()).into(),
            accel_matrix: None,
            gyro_matrix: None,
            g_sensitivity: None,
            initial_gyro_bias: [0.002, -0.001, 0.0015],
            initial_accel_bias: [0.03, -0.02, 0.05],
            intrinsics: default_intrinsics(),
            target: TargetSpec::aprilgrid_6x6(),
        }
    }
}

impl SimulationConfig {
    pub fn to_spec(&self) -> Result<SimulationSpec> {
        let extrinsic = RigidTransform::from_angle_axis(
            Vector3::from(self.extrinsic.rotation_angle_axis),
            Vector3::from(self.extrinsic.translation),
        );
        let imu_intrinsics = if self.accel_matrix.is_some() || self.gyro_matrix.is_some() || self.g_sensitivity.is_some() {
            ImuIntrinsics::scale_misalignment(
                self.accel_matrix.map_or_else(Matrix3::identity, |m| matrix(&m)),
                self.gyro_matrix.map_or_else(Matrix3::identity, |m| matrix(&m)),
                self.g_sensitivity.map_or_else(Matrix3::zeros, |m| matrix(&m)),
            )?
        } else {
            ImuIntrinsics::calibrated()
        };
        let spec = SimulationSpec {
            duration: self.duration_s,
            frame_rate_hz: self.frame_rate_hz,
            imu_rate_hz: self.imu_rate_hz,
            line_delay: self.line_delay_s,
            time_offset: self.time_offset_s,
            extrinsic,
            gravity: GravityState::standard(Vector3::from(self.gravity_direction))
                .map_err(|e| Error::Config(e.to_string()))?,
            noise: ImuNoise {
                sigma_a: self.sigma_a,
                sigma_ba: self.sigma_ba,
                sigma_g: self.sigma_g,
                sigma_bg: self.sigma_bg,
                rate_hz: self.imu_rate_hz,
            },
            sigma_c: self.sigma_c_px,
            target: self.target,
            intrinsics: self.intrinsics,
            trajectory: reference_trajectory(self.trajectory, self.duration_s, self.seed, &extrinsic, &self.target)
                .map_err(|e| Error::Config(e.to_string()))?,
            rng_seed: self.seed,
            timestamp_convention: self.timestamp_convention,
            imu_intrinsics,
            initial_gyro_bias: Vector3::from(self.initial_gyro_bias),
            initial_accel_bias: Vector3::from(self.initial_accel_bias),
            imu_noise_free: self.imu_noise_free,
        };
        spec.validate()?;
        Ok(spec)
    }
}
