//! Residual blocks of the calibration problem and their analytic Jacobians.
//!
//! Parameters live in a tangent vector whose layout interleaves pose and bias
//! control points by the centre time of their support, followed by the
//! time-invariant blocks. With that ordering every residual touches a narrow
//! band of spline columns plus the trailing globals, which keeps the normal
//! equations inside a small envelope.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::{project_with_jacobian, CameraTemporal, Intrinsics, Observation, TimestampConvention};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, hat, right_jacobian, right_jacobian_product_derivative, RigidTransform, Rotation};
use crate::imu::{GravityState, ImuModelKind, ImuNoise, ImuSample};
use crate::splines::VectorSpline;

use super::{CalibrationConfig, ParameterBlock};

/// Lower-triangular entries of `M_a` in parameter order.
pub(crate) const ACCEL_MATRIX_ENTRIES: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Reprojection,
    Accel,
    Gyro,
    BiasPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub pose: Vec<usize>,
    pub bias: Vec<usize>,
    pub extrinsic: usize,
    pub time_offset: Option<usize>,
    pub line_delay: Option<usize>,
    pub gravity: usize,
    /// `M_a` (6), `M_g` (9), `M_s` (9), present for the scale-misalignment model.
    pub imu_intrinsics: Option<usize>,
    pub dim: usize,
}

impl ParameterLayout {
    pub fn new(
        pose: &VectorSpline,
        bias: &VectorSpline,
        estimate_time_offset: bool,
        estimate_line_delay: bool,
        model: ImuModelKind,
    ) -> Self {
        let centre = |s: &VectorSpline, i: usize| s.knots().knot(i) + 0.5 * s.order() as f64 * s.knots().dt();
        let (np, nb) = (pose.num_control_points(), bias.num_control_points());
        let mut pose_offsets = vec![0; np];
        let mut bias_offsets = vec![0; nb];
        let (mut i, mut j, mut next) = (0, 0, 0);
        while i < np || j < nb {
            let take_pose = j >= nb || (i < np && centre(pose, i) <= centre(bias, j));
            if take_pose {
                pose_offsets[i] = next;
                i += 1;
            } else {
                bias_offsets[j] = next;
                j += 1;
            }
            next += 6;
        }
        let extrinsic = next;
        next += 6;
        let mut take = |flag: bool, n: usize| {
            flag.then(|| {
                let at = next;
                next += n;
                at
            })
        };
        let time_offset = take(estimate_time_offset, 1);
        let line_delay = take(estimate_line_delay, 1);
        let gravity = take(true, 2).expect("gravity is always estimated");
        let imu_intrinsics = take(model == ImuModelKind::ScaleMisalignment, 24);
        Self {
            pose: pose_offsets,
            bias: bias_offsets,
            extrinsic,
            time_offset,
            line_delay,
            gravity,
            imu_intrinsics,
            dim: next,
        }
    }

    pub fn num_spline_parameters(&self) -> usize {
        6 * (self.pose.len() + self.bias.len())
    }
}

/// Residual and column-major Jacobian of one block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockEval {
    pub rows: usize,
    pub residual: [f64; 6],
    pub cols: Vec<usize>,
    /// `jacobian[c * rows + r]` is `∂residual[r] / ∂x[cols[c]]`.
    pub jacobian: Vec<f64>,
}

impl BlockEval {
    fn new(rows: usize, capacity: usize, with_jacobian: bool) -> Self {
        Self {
            rows,
            residual: [0.0; 6],
            cols: Vec::with_capacity(if with_jacobian { capacity } else { 0 }),
            jacobian: Vec::with_capacity(if with_jacobian { capacity * rows } else { 0 }),
        }
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual[..self.rows]
    }

    pub fn squared_norm(&self) -> f64 {
        self.residual().iter().map(|x| x * x).sum()
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.jacobian[c * self.rows..(c + 1) * self.rows]
    }

    #[inline]
    fn push_column(&mut self, index: usize, values: impl IntoIterator<Item = f64>) {
        self.cols.push(index);
        let before = self.jacobian.len();
        self.jacobian.extend(values);
        debug_assert_eq!(self.jacobian.len() - before, self.rows);
    }

    fn push_matrix2x3(&mut self, first: usize, m: &Matrix2x3<f64>) {
        for c in 0..3 {
            self.push_column(first + c, [m[(0, c)], m[(1, c)]]);
        }
    }

    fn push_matrix3(&mut self, first: usize, m: &Matrix3<f64>) {
        for c in 0..3 {
            self.push_column(first + c, [m[(0, c)], m[(1, c)], m[(2, c)]]);
        }
    }

    fn scale(&mut self, s: f64) {
        self.residual.iter_mut().for_each(|x| *x *= s);
        self.jacobian.iter_mut().for_each(|x| *x *= s);
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedObservation {
    pub frame_timestamp: f64,
    pub pixel: Vector2<f64>,
    pub landmark: Vector3<f64>,
}

/// Assembled residual set over a parameter state.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub(crate) config: CalibrationConfig,
    pub(crate) intrinsics: Intrinsics,
    pub(crate) noise: ImuNoise,
    pub(crate) observations: Vec<PreparedObservation>,
    pub(crate) imu: Vec<ImuSample>,
    pub(crate) bias_prior_times: Vec<f64>,
    pub(crate) bias_prior_scale: f64,
    pub(crate) state: ParameterBlock,
    pub(crate) layout: ParameterLayout,
}

/// Builds one residual per observation, one accelerometer and one gyroscope
/// residual per IMU sample, and bias random-walk residuals on the bias knot grid.
pub fn assemble(
    observations: &[Observation],
    imu_samples: &[ImuSample],
    intrinsics: &Intrinsics,
    landmarks: &[Vector3<f64>],
    noise: &ImuNoise,
    config: &CalibrationConfig,
    initial: ParameterBlock,
) -> Result<CalibrationProblem> {
    if observations.is_empty() && imu_samples.is_empty() {
        return Err(Error::EmptyProblem("no observations and no IMU samples".into()));
    }
    if observations.is_empty() {
        return Err(Error::EmptyProblem("no camera observations".into()));
    }
    intrinsics.validate()?;
    noise.validate()?;
    if initial.imu.model != config.imu_model {
        return Err(Error::Config(format!(
            "initial IMU intrinsics use {:?} but the configuration asks for {:?}",
            initial.imu.model, config.imu_model
        )));
    }
    let prepared = observations
        .iter()
        .map(|o| {
            let landmark = landmarks.get(o.landmark_id).copied().ok_or(Error::Index {
                index: o.landmark_id,
                len: landmarks.len(),
            })?;
            Ok(PreparedObservation {
                frame_timestamp: o.frame_timestamp,
                pixel: o.pixel,
                landmark,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let bias_knots = initial.bias.knots();
    let dt = bias_knots.dt();
    let (start, end) = initial.bias.domain();
    let n_prior = ((end - start) / dt + 1e-9).floor() as usize + 1;
    let bias_prior_times = (0..n_prior).map(|i| (start + i as f64 * dt).min(end)).collect();

    let layout = ParameterLayout::new(
        initial.pose.spline(),
        &initial.bias,
        config.estimate_time_offset,
        config.estimate_line_delay,
        config.imu_model,
    );
    Ok(CalibrationProblem {
        config: config.clone(),
        intrinsics: *intrinsics,
        noise: *noise,
        observations: prepared,
        imu: imu_samples.to_vec(),
        bias_prior_times,
        bias_prior_scale: dt.sqrt(),
        state: initial,
        layout,
    })
}

impl CalibrationProblem {
    pub fn state(&self) -> &ParameterBlock {
        &self.state
    }

    pub fn set_state(&mut self, state: ParameterBlock) {
        self.state = state;
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn config(&self) -> &CalibrationConfig {
        &self.config
    }

    pub fn num_reprojection_blocks(&self) -> usize {
        self.observations.len()
    }

    pub fn num_imu_blocks(&self) -> usize {
        2 * self.imu.len()
    }

    pub fn num_bias_prior_blocks(&self) -> usize {
        self.bias_prior_times.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_reprojection_blocks() + self.num_imu_blocks() + self.num_bias_prior_blocks()
    }

    pub fn block_kind(&self, block: usize) -> BlockKind {
        let n_obs = self.observations.len();
        let n_imu = 2 * self.imu.len();
        if block < n_obs {
            BlockKind::Reprojection
        } else if block < n_obs + n_imu {
            if (block - n_obs).is_multiple_of(2) {
                BlockKind::Accel
            } else {
                BlockKind::Gyro
            }
        } else {
            BlockKind::BiasPrior
        }
    }

    /// Residual standard deviation used for whitening, per block kind.
    pub fn whitening_scale(&self, kind: BlockKind) -> f64 {
        match kind {
            BlockKind::Reprojection => self.config.sigma_c,
            BlockKind::Accel => self.noise.accel_sample_std(),
            BlockKind::Gyro => self.noise.gyro_sample_std(),
            BlockKind::BiasPrior => 1.0,
        }
    }

    pub(crate) fn temporal(&self, state: &ParameterBlock) -> CameraTemporal {
        CameraTemporal {
            time_offset: state.time_offset,
            line_delay: state.line_delay,
            convention: self.config.timestamp_convention,
        }
    }

    /// Whitened residual (and Jacobian when requested); `None` when the block
    /// falls outside a spline domain or projects behind the camera.
    pub fn evaluate_block(&self, state: &ParameterBlock, block: usize, with_jacobian: bool) -> Option<BlockEval> {
        let n_obs = self.observations.len();
        let n_imu = 2 * self.imu.len();
        if block < n_obs {
            self.reprojection(state, block, with_jacobian)
        } else if block < n_obs + n_imu {
            let i = (block - n_obs) / 2;
            if (block - n_obs).is_multiple_of(2) {
                self.accel(state, i, with_jacobian)
            } else {
                self.gyro(state, i, with_jacobian)
            }
        } else {
            self.bias_prior(state, block - n_obs - n_imu, with_jacobian)
        }
    }

    /// Time at which a block samples the splines.
    pub(crate) fn block_time(&self, state: &ParameterBlock, block: usize) -> f64 {
        let n_obs = self.observations.len();
        let n_imu = 2 * self.imu.len();
        if block < n_obs {
            let o = &self.observations[block];
            self.temporal(state)
                .observation_time(o.frame_timestamp, o.pixel.y, self.intrinsics.height)
        } else if block < n_obs + n_imu {
            self.imu[(block - n_obs) / 2].timestamp
        } else {
            self.bias_prior_times[block - n_obs - n_imu]
        }
    }

    /// Smallest column index the block touches and the column groups it spans,
    /// without evaluating it. `None` when the block is outside a domain.
    pub(crate) fn block_structure(&self, state: &ParameterBlock, block: usize) -> Option<BlockStructure> {
        let kind = self.block_kind(block);
        let t = self.block_time(state, block);
        let pose_first = match kind {
            BlockKind::BiasPrior => None,
            _ => Some(state.pose.spline().weights(t, 0).ok()?.first),
        };
        let bias_first = match kind {
            BlockKind::Reprojection => None,
            _ => Some(state.bias.weights(t, 0).ok()?.first),
        };
        let order = state.pose.spline().order();
        let bias_order = state.bias.order();
        let mut spline_cols = Vec::with_capacity(6 * (order + bias_order));
        if let Some(f) = pose_first {
            for i in f..f + order {
                spline_cols.extend(self.layout.pose[i]..self.layout.pose[i] + 6);
            }
        }
        if let Some(f) = bias_first {
            for i in f..f + bias_order {
                spline_cols.extend(self.layout.bias[i]..self.layout.bias[i] + 6);
            }
        }
        let mut globals = Vec::new();
        let scale_model = self.config.imu_model == ImuModelKind::ScaleMisalignment;
        match kind {
            BlockKind::Reprojection => {
                globals.extend(self.layout.extrinsic..self.layout.extrinsic + 6);
                globals.extend(self.layout.time_offset);
                globals.extend(self.layout.line_delay);
            }
            BlockKind::Accel => {
                globals.extend(self.layout.gravity..self.layout.gravity + 2);
                if let Some(m) = self.layout.imu_intrinsics {
                    globals.extend(m..m + 6);
                }
            }
            BlockKind::Gyro if scale_model => {
                globals.extend(self.layout.gravity..self.layout.gravity + 2);
                if let Some(m) = self.layout.imu_intrinsics {
                    globals.extend(m + 6..m + 24);
                }
            }
            BlockKind::Gyro | BlockKind::BiasPrior => {}
        }
        let min_col = spline_cols.iter().chain(&globals).copied().min()?;
        Some(BlockStructure {
            min_col,
            cols: spline_cols.into_iter().chain(globals).collect(),
        })
    }

    fn reprojection(&self, state: &ParameterBlock, index: usize, with_jacobian: bool) -> Option<BlockEval> {
        let obs = &self.observations[index];
        let temporal = self.temporal(state);
        let height = self.intrinsics.height;
        let t = temporal.observation_time(obs.frame_timestamp, obs.pixel.y, height);
        let spline = state.pose.spline();
        let [w0, w1] = spline.weights_upto::<2>(t).ok()?;
        let mut v = [0.0; 6];
        spline.combine(&w0, &mut v);
        let phi = Vector3::new(v[0], v[1], v[2]);
        let p = Vector3::new(v[3], v[4], v[5]);
        let r_wi = exp_so3(&phi);
        let r_ci = state.extrinsic.rotation.matrix();
        let x_i = r_wi.transpose() * (obs.landmark - p);
        let x_c = r_ci * x_i + state.extrinsic.translation;
        let (pixel, jpi) = project_with_jacobian(&self.intrinsics, &x_c).ok()?;
        let inv_sigma = 1.0 / self.config.sigma_c;
        let res = (pixel - obs.pixel) * inv_sigma;

        let order = spline.order();
        let mut eval = BlockEval::new(2, 6 * order + 8, with_jacobian);
        eval.residual[0] = res.x;
        eval.residual[1] = res.y;
        if !with_jacobian {
            return Some(eval);
        }
        let jr = right_jacobian(&phi);
        let a = jpi * r_ci * inv_sigma;
        let d_phi = a * hat(&x_i) * jr;
        let d_p = -a * r_wi.transpose();
        for (i, w) in w0.iter() {
            let base = self.layout.pose[i];
            eval.push_matrix2x3(base, &(d_phi * w));
            eval.push_matrix2x3(base + 3, &(d_p * w));
        }
        let e = self.layout.extrinsic;
        eval.push_matrix2x3(e, &(-(jpi * hat(&(r_ci * x_i))) * inv_sigma));
        eval.push_matrix2x3(e + 3, &(jpi * inv_sigma));

        if self.layout.time_offset.is_some() || self.layout.line_delay.is_some() {
            spline.combine(&w1, &mut v);
            let phi_dot = Vector3::new(v[0], v[1], v[2]);
            let p_dot = Vector3::new(v[3], v[4], v[5]);
            let dx_dt = hat(&x_i) * (jr * phi_dot) - r_wi.transpose() * p_dot;
            let d_t = a * dx_dt;
            if let Some(c) = self.layout.time_offset {
                eval.push_column(c, [d_t.x, d_t.y]);
            }
            if let Some(c) = self.layout.line_delay {
                let row = obs.pixel.y - temporal.reference_row(height);
                eval.push_column(c, [d_t.x * row, d_t.y * row]);
            }
        }
        Some(eval)
    }

    fn gravity_jacobian(gravity: &GravityState) -> nalgebra::Matrix3x2<f64> {
        // ∂g/∂δ for g = |g| Exp(b1 δ1 + b2 δ2) d
        let (b1, b2) = gravity.tangent_basis();
        let d = hat(gravity.direction()) * (-gravity.magnitude());
        nalgebra::Matrix3x2::from_columns(&[d * b1, d * b2])
    }

    fn accel(&self, state: &ParameterBlock, index: usize, with_jacobian: bool) -> Option<BlockEval> {
        let sample = &self.imu[index];
        let t = sample.timestamp;
        let spline = state.pose.spline();
        let [w0, _w1, w2] = spline.weights_upto::<3>(t).ok()?;
        let wb = state.bias.weights(t, 0).ok()?;
        let mut v = [0.0; 6];
        spline.combine(&w0, &mut v);
        let phi = Vector3::new(v[0], v[1], v[2]);
        spline.combine(&w2, &mut v);
        let acc = Vector3::new(v[3], v[4], v[5]);
        let mut b = [0.0; 6];
        state.bias.combine(&wb, &mut b);
        let b_a = Vector3::new(b[3], b[4], b[5]);

        let r_wi = exp_so3(&phi);
        let a_s = r_wi.transpose() * (acc - state.gravity.vector());
        let scale_model = self.config.imu_model == ImuModelKind::ScaleMisalignment;
        let m_a = state.imu.accel_matrix;
        let predicted = if scale_model { m_a * a_s + b_a } else { a_s + b_a };
        let inv_sigma = 1.0 / self.noise.accel_sample_std();
        let res = (sample.accel - predicted) * inv_sigma;

        let order = spline.order();
        let mut eval = BlockEval::new(3, 6 * order + 3 * state.bias.order() + 8, with_jacobian);
        eval.residual[..3].copy_from_slice(res.as_slice());
        if !with_jacobian {
            return Some(eval);
        }
        let m = if scale_model { m_a } else { Matrix3::identity() };
        let jr = right_jacobian(&phi);
        let d_phi = -(m * hat(&a_s) * jr) * inv_sigma;
        let d_p = -(m * r_wi.transpose()) * inv_sigma;
        for ((i, w), (_, w_acc)) in w0.iter().zip(w2.iter()) {
            let base = self.layout.pose[i];
            eval.push_matrix3(base, &(d_phi * w));
            eval.push_matrix3(base + 3, &(d_p * w_acc));
        }
        for (j, w) in wb.iter() {
            let base = self.layout.bias[j] + 3;
            eval.push_matrix3(base, &(Matrix3::identity() * (-w * inv_sigma)));
        }
        let d_g = -(m * r_wi.transpose() * Self::gravity_jacobian(&state.gravity)) * (-inv_sigma);
        for c in 0..2 {
            eval.push_column(self.layout.gravity + c, [d_g[(0, c)], d_g[(1, c)], d_g[(2, c)]]);
        }
        if let Some(base) = self.layout.imu_intrinsics {
            for (k, &(r, c)) in ACCEL_MATRIX_ENTRIES.iter().enumerate() {
                let mut col = [0.0; 3];
                col[r] = -a_s[c] * inv_sigma;
                eval.push_column(base + k, col);
            }
        }
        Some(eval)
    }

    fn gyro(&self, state: &ParameterBlock, index: usize, with_jacobian: bool) -> Option<BlockEval> {
        let sample = &self.imu[index];
        let t = sample.timestamp;
        let spline = state.pose.spline();
        let [w0, w1, w2] = spline.weights_upto::<3>(t).ok()?;
        let wb = state.bias.weights(t, 0).ok()?;
        let mut v = [0.0; 6];
        spline.combine(&w0, &mut v);
        let phi = Vector3::new(v[0], v[1], v[2]);
        spline.combine(&w1, &mut v);
        let phi_dot = Vector3::new(v[0], v[1], v[2]);
        let mut b = [0.0; 6];
        state.bias.combine(&wb, &mut b);
        let b_g = Vector3::new(b[0], b[1], b[2]);

        let jr = right_jacobian(&phi);
        let omega = jr * phi_dot;
        let scale_model = self.config.imu_model == ImuModelKind::ScaleMisalignment;
        let (r_wi, a_s) = if scale_model {
            spline.combine(&w2, &mut v);
            let acc = Vector3::new(v[3], v[4], v[5]);
            let r = exp_so3(&phi);
            let a_s = r.transpose() * (acc - state.gravity.vector());
            (r, a_s)
        } else {
            (Matrix3::identity(), Vector3::zeros())
        };
        let predicted = if scale_model {
            state.imu.gyro_matrix * omega + state.imu.g_sensitivity * a_s + b_g
        } else {
            omega + b_g
        };
        let inv_sigma = 1.0 / self.noise.gyro_sample_std();
        let res = (sample.gyro - predicted) * inv_sigma;

        let order = spline.order();
        let mut eval = BlockEval::new(3, 6 * order + 3 * state.bias.order() + 20, with_jacobian);
        eval.residual[..3].copy_from_slice(res.as_slice());
        if !with_jacobian {
            return Some(eval);
        }
        let d_rate = right_jacobian_product_derivative(&phi, &phi_dot);
        let m_g = if scale_model { state.imu.gyro_matrix } else { Matrix3::identity() };
        let m_s = state.imu.g_sensitivity;
        let d_force_phi = hat(&a_s) * jr;
        for (((i, w), (_, w_dot)), (_, w_acc)) in w0.iter().zip(w1.iter()).zip(w2.iter()) {
            let base = self.layout.pose[i];
            let mut d_phi = m_g * (jr * w_dot + d_rate * w);
            if scale_model {
                d_phi += m_s * d_force_phi * w;
            }
            eval.push_matrix3(base, &(d_phi * (-inv_sigma)));
            if scale_model {
                eval.push_matrix3(base + 3, &(m_s * r_wi.transpose() * (-w_acc * inv_sigma)));
            }
        }
        for (j, w) in wb.iter() {
            eval.push_matrix3(self.layout.bias[j], &(Matrix3::identity() * (-w * inv_sigma)));
        }
        if scale_model {
            let d_g = m_s * r_wi.transpose() * Self::gravity_jacobian(&state.gravity) * inv_sigma;
            for c in 0..2 {
                eval.push_column(self.layout.gravity + c, [d_g[(0, c)], d_g[(1, c)], d_g[(2, c)]]);
            }
            if let Some(base) = self.layout.imu_intrinsics {
                for r in 0..3 {
                    for c in 0..3 {
                        let mut col = [0.0; 3];
                        col[r] = -omega[c] * inv_sigma;
                        eval.push_column(base + 6 + 3 * r + c, col);
                    }
                }
                for r in 0..3 {
                    for c in 0..3 {
                        let mut col = [0.0; 3];
                        col[r] = -a_s[c] * inv_sigma;
                        eval.push_column(base + 15 + 3 * r + c, col);
                    }
                }
            }
        }
        Some(eval)
    }

    fn bias_prior(&self, state: &ParameterBlock, index: usize, with_jacobian: bool) -> Option<BlockEval> {
        let t = self.bias_prior_times[index];
        let w1 = state.bias.weights(t, 1).ok()?;
        let mut d = [0.0; 6];
        state.bias.combine(&w1, &mut d);
        let sa = self.bias_prior_scale / self.noise.sigma_ba;
        let sg = self.bias_prior_scale / self.noise.sigma_bg;
        let mut eval = BlockEval::new(6, 6 * state.bias.order(), with_jacobian);
        eval.residual = [d[3] * sa, d[4] * sa, d[5] * sa, d[0] * sg, d[1] * sg, d[2] * sg];
        if !with_jacobian {
            return Some(eval);
        }
        for (j, w) in w1.iter() {
            let base = self.layout.bias[j];
            for c in 0..3 {
                let mut col = [0.0; 6];
                col[3 + c] = w * sg;
                eval.push_column(base + c, col);
            }
            for c in 0..3 {
                let mut col = [0.0; 6];
                col[c] = w * sa;
                eval.push_column(base + 3 + c, col);
            }
        }
        Some(eval)
    }

    /// Applies a tangent-space step.
    pub fn retract(&self, state: &ParameterBlock, delta: &[f64]) -> ParameterBlock {
        assert_eq!(delta.len(), self.layout.dim);
        let mut next = state.clone();
        {
            let spline = next.pose.spline_mut();
            for (i, &off) in self.layout.pose.iter().enumerate() {
                for (x, d) in spline.control_point_mut(i).iter_mut().zip(&delta[off..off + 6]) {
                    *x += d;
                }
            }
        }
        for (j, &off) in self.layout.bias.iter().enumerate() {
            for (x, d) in next.bias.control_point_mut(j).iter_mut().zip(&delta[off..off + 6]) {
                *x += d;
            }
        }
        let e = self.layout.extrinsic;
        let d_rot = Vector3::new(delta[e], delta[e + 1], delta[e + 2]);
        let rotation = Rotation::orthonormalized(&(exp_so3(&d_rot) * state.extrinsic.rotation.matrix()));
        next.extrinsic = RigidTransform::new(
            rotation,
            state.extrinsic.translation + Vector3::new(delta[e + 3], delta[e + 4], delta[e + 5]),
        );
        if let Some(c) = self.layout.time_offset {
            next.time_offset += delta[c];
        }
        if let Some(c) = self.layout.line_delay {
            next.line_delay = (next.line_delay + delta[c]).clamp(0.0, self.config.max_line_delay);
        }
        let g = self.layout.gravity;
        next.gravity = state.gravity.perturbed([delta[g], delta[g + 1]]);
        if let Some(base) = self.layout.imu_intrinsics {
            for (k, &(r, c)) in ACCEL_MATRIX_ENTRIES.iter().enumerate() {
                next.imu.accel_matrix[(r, c)] += delta[base + k];
            }
            for r in 0..3 {
                for c in 0..3 {
                    next.imu.gyro_matrix[(r, c)] += delta[base + 6 + 3 * r + c];
                    next.imu.g_sensitivity[(r, c)] += delta[base + 15 + 3 * r + c];
                }
            }
        }
        next
    }

    pub fn timestamp_convention(&self) -> TimestampConvention {
        self.config.timestamp_convention
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockStructure {
    pub min_col: usize,
    pub cols: Vec<usize>,
}

/// Robust reweighting of a whitened residual block: returns the cost
/// contribution and the factor applied to residual and Jacobian.
pub(crate) fn huber(squared_norm: f64, width: Option<f64>) -> (f64, f64) {
    match width {
        Some(k) if squared_norm > k * k => {
            let norm = squared_norm.sqrt();
            (2.0 * k * norm - k * k, (k / norm).sqrt())
        }
        _ => (squared_norm, 1.0),
    }
}

impl BlockEval {
    pub(crate) fn reweight(&mut self, factor: f64) {
        if factor != 1.0 {
            self.scale(factor);
        }
    }
}
