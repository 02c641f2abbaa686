//! Workflows behind the `rscalib` command: simulate, calibrate, allan, evaluate.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rscalib::allan::{analyze_imu, ExtractOptions, RegionOverrides};
use rscalib::camera::Intrinsics;
use rscalib::estimator::{calibrate, evaluate_parameters, CalibrationConfig, CalibrationData, ErrorSummary};
use rscalib::imu::ImuModelKind;
use rscalib::io::{self, NoiseConfig, ReportFile, SimulationConfig};
use rscalib::simulator::{simulate_imu, simulate_observations, LINE_DELAY_SWEEP};
use rscalib::target::TargetSpec;

pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const INTRINSICS_FILE: &str = "intrinsics.toml";
pub const TARGET_FILE: &str = "target.toml";
pub const NOISE_FILE: &str = "noise.toml";
pub const CALIBRATION_FILE: &str = "calibration.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "allan_curves.csv";
pub const NOISE_TABLE_FILE: &str = "noise_parameters.csv";

/// Static recordings shorter than this give unreliable random-walk estimates.
const RECOMMENDED_ALLAN_DURATION_S: f64 = 3600.0;

/// Process exit status for a failed command.
pub fn exit_code(error: &anyhow::Error) -> i32 {
    use rscalib::Error as E;
    match error.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_) | E::Argument(_)) => 2,
        Some(E::Numerical(_) | E::Rank(_) | E::NonConvergence(_) | E::Degenerate(_) | E::BehindCamera { .. }) => 4,
        Some(_) => 3,
        None => 2,
    }
}

/// Reads a settings file; anything unreadable there is a configuration error.
fn read_settings<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    io::read_toml(path).map_err(|e| rscalib::Error::Config(e.to_string()).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShutterMode {
    RollingShutter,
    GlobalShutter,
}

/// Files of one dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: PathBuf,
    pub imu: PathBuf,
    pub intrinsics: PathBuf,
    pub target: PathBuf,
    pub noise: PathBuf,
    /// Optional calibration settings; defaults apply when absent.
    pub calibration: Option<PathBuf>,
}

impl Dataset {
    /// The conventional file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let calibration = dir.join(CALIBRATION_FILE);
        Self {
            observations: dir.join(OBSERVATIONS_FILE),
            imu: dir.join(IMU_FILE),
            intrinsics: dir.join(INTRINSICS_FILE),
            target: dir.join(TARGET_FILE),
            noise: dir.join(NOISE_FILE),
            calibration: calibration.exists().then_some(calibration),
        }
    }
}

/// Writes one simulated dataset plus its ground truth into `out`.
pub fn simulate_dataset(config: &SimulationConfig, out: &Path) -> Result<()> {
    let spec = config.to_spec()?;
    let observations = simulate_observations(&spec)?;
    if observations.skipped > 0 {
        log::warn!("{} landmarks skipped: capture time did not converge", observations.skipped);
    }
    let imu = simulate_imu(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_observations(&out.join(OBSERVATIONS_FILE), &observations.observations)?;
    io::write_imu(&out.join(IMU_FILE), &imu.samples)?;
    io::write_toml(&out.join(INTRINSICS_FILE), &spec.intrinsics)?;
    io::write_toml(&out.join(TARGET_FILE), &spec.target)?;
    let model = if spec.imu_intrinsics.model == ImuModelKind::Calibrated {
        ImuModelKind::Calibrated
    } else {
        ImuModelKind::ScaleMisalignment
    };
    io::write_toml(&out.join(NOISE_FILE), &NoiseConfig::new(spec.noise, model))?;
    let calibration = CalibrationConfig {
        timestamp_convention: spec.timestamp_convention,
        sigma_c: spec.sigma_c.max(0.1),
        imu_model: model,
        ..CalibrationConfig::desk_scale()
    };
    io::write_toml(&out.join(CALIBRATION_FILE), &calibration)?;
    io::write_toml(&out.join(GROUND_TRUTH_FILE), &ReportFile::from_simulation(&spec))?;
    log::info!(
        "{}: {} frames, {} observations, {} IMU samples",
        out.display(),
        spec.num_frames(),
        observations.observations.len(),
        imu.samples.len()
    );
    Ok(())
}

/// Directory name of one line-delay variant.
pub fn sweep_dir_name(line_delay: f64) -> String {
    format!("line_delay_{:.3}us", line_delay * 1e6)
}

/// `simulate`: one dataset, or one per sweep line delay in subdirectories.
pub fn cmd_simulate(spec_file: Option<&Path>, out: &Path, sweep: bool, seed: Option<u64>) -> Result<Vec<PathBuf>> {
    let mut config: SimulationConfig = match spec_file {
        Some(path) => read_settings(path)?,
        None => SimulationConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if !sweep {
        simulate_dataset(&config, out)?;
        return Ok(vec![out.to_path_buf()]);
    }
    LINE_DELAY_SWEEP
        .iter()
        .map(|&d| {
            let dir = out.join(sweep_dir_name(d));
            simulate_dataset(
                &SimulationConfig {
                    line_delay_s: d,
                    ..config.clone()
                },
                &dir,
            )?;
            Ok(dir)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrateOptions {
    pub mode: ShutterMode,
    pub imu_model: Option<ImuModelKind>,
    pub threads: Option<usize>,
}

/// `calibrate`: writes `report.toml` and `summary.csv` into `out`.
pub fn cmd_calibrate(dataset: &Dataset, options: CalibrateOptions, out: &Path) -> Result<ReportFile> {
    let mut config: CalibrationConfig = match &dataset.calibration {
        Some(path) => read_settings(path)?,
        None => CalibrationConfig::default(),
    };
    let noise_config: NoiseConfig = io::read_toml(&dataset.noise)?;
    config.imu_model = options.imu_model.unwrap_or(config.imu_model);
    if let Some(threads) = options.threads {
        config.threads = threads;
    }
    if options.mode == ShutterMode::GlobalShutter {
        config = config.global_shutter();
    }
    let intrinsics: Intrinsics = io::read_toml(&dataset.intrinsics)?;
    let target: TargetSpec = io::read_toml(&dataset.target)?;
    let noise = noise_config.noise();
    let observations = io::read_observations(&dataset.observations)?;
    let imu = io::read_imu(&dataset.imu)?;
    io::validate_streams(&observations, &imu)?;
    let landmarks = target.landmark_table();
    let data = CalibrationData {
        observations: &observations,
        imu: &imu,
        intrinsics: &intrinsics,
        landmarks: &landmarks,
        noise: &noise,
    };
    let report = calibrate(&data, &config)?;
    let d = &report.diagnostics;
    log::info!(
        "{:?} after {} iterations, cost {:.6e} -> {:.6e}",
        d.termination,
        d.iterations,
        d.initial_cost,
        d.final_cost
    );
    let file = ReportFile::from_report(&report);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_toml(&out.join(REPORT_FILE), &file)?;
    fs::write(out.join(SUMMARY_FILE), io::summary_csv(&file))?;
    Ok(file)
}

/// Settings of the `allan` command.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllanConfig {
    pub flicker_normalization: bool,
    pub regions: RegionOverrides,
}

/// `allan`: per-channel curves and the noise-parameter table.
pub fn cmd_allan(imu_file: &Path, config: Option<&Path>, out: &Path) -> Result<String> {
    let config: AllanConfig = match config {
        Some(path) => read_settings(path)?,
        None => AllanConfig::default(),
    };
    let samples = io::read_imu(imu_file)?;
    let options = ExtractOptions {
        flicker_normalization: config.flicker_normalization,
        overrides: config.regions,
    };
    let analysis = analyze_imu(&samples, None, &options)?;
    if analysis.duration < RECOMMENDED_ALLAN_DURATION_S {
        log::warn!(
            "{:.0} s of data; at least one hour is recommended, cluster times stop at {:.0} s",
            analysis.duration,
            analysis.duration / 9.0
        );
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(CURVES_FILE), analysis.curves_csv())?;
    let table = analysis.noise_table();
    fs::write(out.join(NOISE_TABLE_FILE), &table)?;
    Ok(table)
}

/// Error of one report against one reference file.
pub fn evaluate_files(report: &Path, reference: &Path) -> Result<ErrorSummary> {
    let estimate: ReportFile = io::read_toml(report)?;
    let truth: ReportFile = io::read_toml(reference)?;
    Ok(ErrorSummary {
        median_reprojection_px: estimate.median_reprojection_px(),
        ..evaluate_parameters(&estimate.parameters()?, &truth.parameters()?)
    })
}

/// `evaluate`: one CSV row per (report, reference) pair.
pub fn cmd_evaluate(pairs: &[(PathBuf, PathBuf)], labels: &[String]) -> Result<String> {
    if pairs.is_empty() {
        bail!(rscalib::Error::Argument("no report/reference pairs".into()));
    }
    if !labels.is_empty() && labels.len() != pairs.len() {
        bail!(rscalib::Error::Argument(format!(
            "{} labels for {} reports",
            labels.len(),
            pairs.len()
        )));
    }
    let mut csv = format!("{}\n", io::ERROR_HEADER);
    for (i, (report, reference)) in pairs.iter().enumerate() {
        let summary = evaluate_files(report, reference)?;
        let label = labels.get(i).cloned().unwrap_or_else(|| report.display().to_string());
        csv.push_str(&io::error_row(&label, &summary));
        csv.push('\n');
    }
    Ok(csv)
}
