//! Levenberg–Marquardt over the sparse normal equations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::SkylineMatrix;

use super::problem::{huber, BlockKind, CalibrationProblem};
use super::{CalibrationReport, ParameterBlock, ResidualStatistics, ResidualSummary, SolverDiagnostics, Termination};

const INITIAL_DAMPING: f64 = 1e-4;
const MAX_DAMPING: f64 = 1e12;
const MIN_DAMPING: f64 = 1e-15;
/// Blocks evaluated per parallel task.
const CHUNK: usize = 1024;
/// Chunks evaluated before their results are accumulated.
const WAVE: usize = 32;
/// Whitened residual norm beyond which the robust loss turns linear.
const HUBER_WIDTH: f64 = 2.0;

struct Linearization {
    hessian: SkylineMatrix,
    gradient: Vec<f64>,
    cost: f64,
}

impl CalibrationProblem {
    fn huber_width(&self, kind: BlockKind) -> Option<f64> {
        (self.config.robust_loss && kind == BlockKind::Reprojection).then_some(HUBER_WIDTH)
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    /// Total cost `Σ ρ(‖r‖²)` at `state`.
    pub fn cost(&self, state: &ParameterBlock) -> f64 {
        let per_chunk: Vec<f64> = (0..self.num_blocks().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let end = ((c + 1) * CHUNK).min(self.num_blocks());
                (c * CHUNK..end)
                    .filter_map(|b| {
                        let e = self.evaluate_block(state, b, false)?;
                        Some(huber(e.squared_norm(), self.huber_width(self.block_kind(b))).0)
                    })
                    .sum()
            })
            .collect();
        per_chunk.iter().sum()
    }

    fn envelope(&self, state: &ParameterBlock) -> Vec<usize> {
        let dim = self.layout.dim;
        let structures: Vec<Vec<(usize, usize)>> = (0..self.num_blocks().div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let end = ((c + 1) * CHUNK).min(self.num_blocks());
                let mut out = Vec::new();
                for b in c * CHUNK..end {
                    if let Some(s) = self.block_structure(state, b) {
                        out.extend(s.cols.iter().map(|&col| (col, s.min_col)));
                    }
                }
                out
            })
            .collect();
        let mut first: Vec<usize> = (0..dim).collect();
        for (col, min_col) in structures.into_iter().flatten() {
            first[col] = first[col].min(min_col);
        }
        first
    }

    fn linearize(&self, state: &ParameterBlock) -> Linearization {
        let dim = self.layout.dim;
        let mut hessian = SkylineMatrix::new(self.envelope(state));
        let mut gradient = vec![0.0; dim];
        let mut cost = 0.0;
        let n_blocks = self.num_blocks();
        let n_chunks = n_blocks.div_ceil(CHUNK);
        for wave in (0..n_chunks).step_by(WAVE) {
            let evaluated: Vec<Vec<_>> = (wave..(wave + WAVE).min(n_chunks))
                .into_par_iter()
                .map(|c| {
                    let end = ((c + 1) * CHUNK).min(n_blocks);
                    (c * CHUNK..end)
                        .filter_map(|b| {
                            let mut e = self.evaluate_block(state, b, true)?;
                            let (rho, w) = huber(e.squared_norm(), self.huber_width(self.block_kind(b)));
                            e.reweight(w);
                            Some((rho, e))
                        })
                        .collect()
                })
                .collect();
            for chunk in &evaluated {
                cost += chunk.iter().map(|(rho, _)| rho).sum::<f64>();
            }
            for (_, e) in evaluated.iter().flatten() {
                let r = e.residual();
                for (a, &ca) in e.cols.iter().enumerate() {
                    let ja = e.column(a);
                    gradient[ca] += dot(ja, r);
                    for (b, &cb) in e.cols.iter().enumerate().take(a + 1) {
                        hessian.add(ca, cb, dot(ja, e.column(b)));
                    }
                }
            }
        }
        Linearization {
            hessian,
            gradient,
            cost,
        }
    }

    fn statistics(&self, state: &ParameterBlock) -> ResidualSummary {
        let mut norms: [Vec<(f64, f64)>; 4] = Default::default();
        let mut dropped = [0usize; 4];
        let slot = |k: BlockKind| match k {
            BlockKind::Reprojection => 0,
            BlockKind::Accel => 1,
            BlockKind::Gyro => 2,
            BlockKind::BiasPrior => 3,
        };
        let evaluated: Vec<Option<(f64, usize)>> = (0..self.num_blocks())
            .into_par_iter()
            .map(|b| self.evaluate_block(state, b, false).map(|e| (e.squared_norm(), e.rows)))
            .collect();
        for (b, e) in evaluated.into_iter().enumerate() {
            let kind = self.block_kind(b);
            match e {
                Some((sq, rows)) => {
                    let scale = self.whitening_scale(kind);
                    norms[slot(kind)].push((sq.sqrt() * scale, sq / rows as f64));
                }
                None => dropped[slot(kind)] += 1,
            }
        }
        let summarize = |i: usize| -> ResidualStatistics {
            let v = &mut norms[i].clone();
            if v.is_empty() {
                return ResidualStatistics {
                    dropped: dropped[i],
                    ..Default::default()
                };
            }
            let n = v.len() as f64;
            let rms = (v.iter().map(|(x, _)| x * x).sum::<f64>() / n).sqrt();
            let whitened_rms = (v.iter().map(|(_, w)| w).sum::<f64>() / n).sqrt();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            let m = v.len();
            let median = if m % 2 == 1 {
                v[m / 2].0
            } else {
                0.5 * (v[m / 2 - 1].0 + v[m / 2].0)
            };
            ResidualStatistics {
                count: m,
                dropped: dropped[i],
                median,
                rms,
                whitened_rms,
            }
        };
        ResidualSummary {
            reprojection: summarize(0),
            accel: summarize(1),
            gyro: summarize(2),
            bias_prior: summarize(3),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the problem cost from its current state.
pub fn solve(problem: CalibrationProblem) -> Result<CalibrationReport> {
    solve_with_progress(problem, |_, _| {})
}

/// [`solve`] with a callback receiving `(iteration, cost)` after each accepted step.
pub fn solve_with_progress(
    problem: CalibrationProblem,
    mut progress: impl FnMut(usize, f64) + Send,
) -> Result<CalibrationReport> {
    let pool = problem.thread_pool()?;
    pool.install(|| run(problem, &mut progress))
}

fn run(problem: CalibrationProblem, progress: &mut dyn FnMut(usize, f64)) -> Result<CalibrationReport> {
    let config = problem.config.clone();
    let mut state = problem.state.clone();
    let mut lin = problem.linearize(&state);
    if !lin.cost.is_finite() {
        return Err(Error::Numerical(format!("initial cost is {}", lin.cost)));
    }
    let mut history = vec![lin.cost];
    let mut lambda = INITIAL_DAMPING;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    'outer: while iterations < config.max_iterations {
        iterations += 1;
        let mut gradient = lin.gradient.clone();
        let diag: Vec<f64> = (0..problem.layout.dim).map(|i| lin.hessian.diagonal(i)).collect();
        for (i, d) in diag.iter().enumerate() {
            if *d == 0.0 {
                lin.hessian.set_diagonal(i, 1.0);
                gradient[i] = 0.0;
            }
        }
        loop {
            let mut system = lin.hessian.clone();
            for (i, d) in diag.iter().enumerate() {
                if *d != 0.0 {
                    system.set_diagonal(i, d * (1.0 + lambda));
                }
            }
            if system.factorize(1e-14).is_err() {
                lambda *= 10.0;
                if lambda > MAX_DAMPING {
                    termination = Termination::Stalled;
                    break 'outer;
                }
                continue;
            }
            let mut step: Vec<f64> = gradient.iter().map(|g| -g).collect();
            system.solve_in_place(&mut step);
            let step_norm = step.iter().map(|x| x * x).sum::<f64>().sqrt();
            if step_norm < config.parameter_tolerance {
                termination = Termination::ParameterTolerance;
                break 'outer;
            }
            let candidate = problem.retract(&state, &step);
            let cost = problem.cost(&candidate);
            if cost.is_finite() && cost < lin.cost {
                let relative = (lin.cost - cost) / lin.cost;
                state = candidate;
                lin = problem.linearize(&state);
                if !lin.cost.is_finite() {
                    return Err(Error::Numerical(format!("cost became {}", lin.cost)));
                }
                history.push(lin.cost);
                progress(iterations, lin.cost);
                lambda = (lambda / 10.0).max(MIN_DAMPING);
                log::debug!("iteration {iterations}: cost {:.6e}, lambda {lambda:.1e}", lin.cost);
                if relative < config.function_tolerance {
                    termination = Termination::FunctionTolerance;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > MAX_DAMPING {
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }
    if termination == Termination::MaxIterations {
        log::warn!("solver stopped after {iterations} iterations without meeting a tolerance");
    }
    let statistics = problem.statistics(&state);
    let final_cost = *history.last().expect("initial cost recorded");
    Ok(CalibrationReport {
        timestamp_convention: config.timestamp_convention,
        parameters: state,
        statistics,
        diagnostics: SolverDiagnostics {
            iterations,
            initial_cost: history[0],
            final_cost,
            converged: termination != Termination::MaxIterations,
            termination,
            cost_history: history,
        },
    })
}
