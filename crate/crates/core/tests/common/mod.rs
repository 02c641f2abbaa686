//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rscalib::estimator::{assemble, initialize, BlockKind, CalibrationConfig, CalibrationData, CalibrationProblem, ParameterBlock};
use rscalib::imu::{ImuIntrinsics, ImuModelKind};
use rscalib::simulator::SimulationSpec;

pub const INSTANCES: usize = 100;
pub const TOLERANCE: f64 = 1e-4;

pub fn jacobian_problem(model: ImuModelKind) -> CalibrationProblem {
    let mut spec = SimulationSpec::desk_scale(82.5e-6, 3).unwrap();
    spec.duration = 12.0;
    spec.trajectory = rscalib::simulator::reference_trajectory(
        rscalib::simulator::TrajectoryKind::Figure8,
        12.0,
        3,
        &spec.extrinsic,
        &spec.target,
    )
    .unwrap();
    let obs = rscalib::simulator::simulate_observations(&spec).unwrap();
    let imu = rscalib::simulator::simulate_imu(&spec).unwrap();
    let landmarks = spec.target.landmark_table();
    let data = CalibrationData {
        observations: &obs.observations,
        imu: &imu.samples,
        intrinsics: &spec.intrinsics,
        landmarks: &landmarks,
        noise: &spec.noise,
    };
    let config = CalibrationConfig {
        timestamp_convention: spec.timestamp_convention,
        imu_model: model,
        ..CalibrationConfig::desk_scale()
    };
    let mut initial = initialize(&data, &config).unwrap();
    if model == ImuModelKind::ScaleMisalignment {
        initial.imu = ImuIntrinsics::scale_misalignment(
            Matrix3::new(1.02, 0.0, 0.0, 0.01, 0.98, 0.0, -0.02, 0.015, 1.01),
            Matrix3::new(1.01, 0.003, -0.002, 0.004, 0.99, 0.001, -0.003, 0.002, 1.02),
            Matrix3::new(1e-3, -2e-3, 5e-4, 1e-3, 2e-3, -1e-3, 3e-4, 1e-3, -2e-3),
        )
        .unwrap();
    }
    initial.line_delay = 82.5e-6;
    assemble(
        data.observations,
        data.imu,
        data.intrinsics,
        data.landmarks,
        data.noise,
        &config,
        initial,
    )
    .unwrap()
}

/// Random tangent perturbation so checks do not sit at a special point.
fn jitter(problem: &CalibrationProblem, rng: &mut ChaCha8Rng) -> ParameterBlock {
    let layout = problem.layout();
    let mut delta = vec![0.0; layout.dim];
    for (i, d) in delta.iter_mut().enumerate() {
        let scale = if Some(i) == layout.line_delay { 5e-6 } else { 1e-3 };
        *d = scale * rng.random_range(-1.0..1.0);
    }
    problem.retract(problem.state(), &delta)
}

fn step_for(problem: &CalibrationProblem, col: usize) -> f64 {
    if Some(col) == problem.layout().line_delay {
        1e-8
    } else {
        1e-6
    }
}

/// Worst relative error over `INSTANCES` random blocks of `kind`.
pub fn worst_error(problem: &CalibrationProblem, kind: BlockKind, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<usize> = (0..problem.num_blocks()).filter(|&b| problem.block_kind(b) == kind).collect();
    let dim = problem.layout().dim;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < INSTANCES {
        let state = jitter(problem, &mut rng);
        let block = blocks[rng.random_range(0..blocks.len())];
        let Some(eval) = problem.evaluate_block(&state, block, true) else {
            continue;
        };
        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for (a, &col) in eval.cols.iter().enumerate() {
            let h = step_for(problem, col);
            let mut delta = vec![0.0; dim];
            delta[col] = h;
            let plus = problem.evaluate_block(&problem.retract(&state, &delta), block, false).unwrap();
            delta[col] = -h;
            let minus = problem.evaluate_block(&problem.retract(&state, &delta), block, false).unwrap();
            for r in 0..eval.rows {
                let numeric = (plus.residual[r] - minus.residual[r]) / (2.0 * h);
                let analytic = eval.column(a)[r];
                diff_sq += (numeric - analytic).powi(2);
                norm_sq += numeric.powi(2);
            }
        }
        worst = worst.max(diff_sq.sqrt() / norm_sq.sqrt().max(1e-12));
        checked += 1;
    }
    (worst, checked)
}

/// Same check restricted to one column, for the temporal parameters.
pub fn worst_column_error(problem: &CalibrationProblem, col: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obs = problem.num_reprojection_blocks();
    let dim = problem.layout().dim;
    let h = step_for(problem, col);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < INSTANCES {
        let state = jitter(problem, &mut rng);
        let block = rng.random_range(0..n_obs);
        let Some(eval) = problem.evaluate_block(&state, block, true) else {
            continue;
        };
        let a = eval.cols.iter().position(|&c| c == col).expect("temporal column present");
        let mut delta = vec![0.0; dim];
        delta[col] = h;
        let plus = problem.evaluate_block(&problem.retract(&state, &delta), block, false).unwrap();
        delta[col] = -h;
        let minus = problem.evaluate_block(&problem.retract(&state, &delta), block, false).unwrap();
        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for r in 0..2 {
            let numeric = (plus.residual[r] - minus.residual[r]) / (2.0 * h);
            diff_sq += (numeric - eval.column(a)[r]).powi(2);
            norm_sq += numeric.powi(2);
        }
        worst = worst.max(diff_sq.sqrt() / norm_sq.sqrt().max(1e-12));
        checked += 1;
    }
    worst
}

