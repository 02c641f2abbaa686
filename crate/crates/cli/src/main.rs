use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use rscalib::imu::ImuModelKind;
use rscalib_cli::{cmd_allan, cmd_calibrate, cmd_evaluate, cmd_simulate, exit_code, CalibrateOptions, Dataset, ShutterMode};

#[derive(Parser)]
#[command(name = "rscalib", version, about = "Rolling-shutter camera-IMU spatiotemporal calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Estimate the line delay.
    Rs,
    /// Freeze the line delay at zero.
    Gs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImuModel {
    Calibrated,
    #[value(alias = "scale_misalignment")]
    ScaleMisalign,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        /// Simulation TOML; desk-scale defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// One dataset per line delay of 137.5, 82.5, 51.563 and 41.25 µs.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate extrinsics, time offset, line delay, gravity and IMU biases.
    Calibrate {
        /// Directory holding observations.csv, imu.csv, intrinsics.toml, target.toml, noise.toml.
        #[arg(long)]
        dataset: PathBuf,
        /// Calibration settings, overriding the dataset's calibration.toml.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "rs")]
        mode: Mode,
        #[arg(long, value_enum)]
        imu_model: Option<ImuModel>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 1 gives the reference result, 0 uses every core.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Allan deviation of a static IMU recording.
    Allan {
        #[arg(long)]
        imu: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reports with references.
    Evaluate {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long = "reference", required = true)]
        references: Vec<PathBuf>,
        #[arg(long = "label")]
        labels: Vec<String>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { spec, out, sweep, seed } => {
            for dir in cmd_simulate(spec.as_deref(), &out, sweep, seed)? {
                println!("{}", dir.display());
            }
        }
        Command::Calibrate {
            dataset,
            config,
            mode,
            imu_model,
            out,
            threads,
        } => {
            let mut files = Dataset::in_dir(&dataset);
            if config.is_some() {
                files.calibration = config;
            }
            let options = CalibrateOptions {
                mode: match mode {
                    Mode::Rs => ShutterMode::RollingShutter,
                    Mode::Gs => ShutterMode::GlobalShutter,
                },
                imu_model: imu_model.map(|m| match m {
                    ImuModel::Calibrated => ImuModelKind::Calibrated,
                    ImuModel::ScaleMisalign => ImuModelKind::ScaleMisalignment,
                }),
                threads,
            };
            let report = cmd_calibrate(&files, options, &out)?;
            print!("{}", rscalib::io::summary_csv(&report));
        }
        Command::Allan { imu, config, out } => {
            print!("{}", cmd_allan(&imu, config.as_deref(), &out)?);
        }
        Command::Evaluate {
            reports,
            references,
            labels,
            out,
        } => {
            if reports.len() != references.len() {
                anyhow::bail!(rscalib::Error::Argument(format!(
                    "{} reports but {} references",
                    reports.len(),
                    references.len()
                )));
            }
            let pairs: Vec<_> = reports.into_iter().zip(references).collect();
            let csv = cmd_evaluate(&pairs, &labels)?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
