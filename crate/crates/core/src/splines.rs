//! Vector-valued uniform B-splines.
//!
//! A spline of order `k` over a [`KnotGrid`] with `count` knots carries
//! `N = count - k` control points and is evaluated only on its valid domain
//! `[t_{k-1}, t_N]`, where exactly `k` control points have nonzero weight.
//! Evaluation uses the constant blending matrix of the uniform basis; the
//! Cox–de Boor recursion in [`basis_weight`] is kept as an independent route.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SkylineMatrix;

pub const MAX_ORDER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    /// Position of knot `anchor`.
    t0: f64,
    dt: f64,
    count: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    anchor: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl KnotGrid {
    pub fn new(t0: f64, dt: f64, count: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::Argument(format!("knot spacing must be positive, got {dt}")));
        }
        if count < 2 {
            return Err(Error::Argument(format!("need at least 2 knots, got {count}")));
        }
        Ok(Self { t0, dt, count, anchor: 0 })
    }

    /// Grid whose order-`order` valid domain starts at `start` and reaches at least `end`.
    pub fn covering(start: f64, end: f64, dt: f64, order: usize) -> Result<Self> {
        if !(end >= start) {
            return Err(Error::Argument(format!("empty span [{start}, {end}]")));
        }
        check_order(order)?;
        let segments = (((end - start) / dt) - 1e-9).ceil().max(1.0) as usize;
        let n_ctrl = segments + order - 1;
        // Anchored at the domain start so that knot lands exactly on `start`.
        Ok(Self {
            anchor: order - 1,
            ..Self::new(start, dt, n_ctrl + order)?
        })
    }

    /// Position of the first knot.
    pub fn t0(&self) -> f64 {
        self.knot(0)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn knot(&self, i: usize) -> f64 {
        self.t0 + (i as f64 - self.anchor as f64) * self.dt
    }

    /// Same spacing with every knot moved by `offset`.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            t0: self.t0 + offset,
            ..*self
        }
    }

    /// `[t_{k-1}, t_N]` with `N = count - k`.
    pub fn valid_domain(&self, order: usize) -> (f64, f64) {
        (self.knot(order - 1), self.knot(self.count - order))
    }
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::Argument(format!(
            "spline order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    Ok(())
}

/// Knot interval index `j` with `t ∈ [t_j, t_{j+1})` and `u = (t - t_j)/dt`.
///
/// The right end of the valid domain belongs to the last segment with `u = 1`.
pub fn segment_of(knots: &KnotGrid, order: usize, t: f64) -> Result<(usize, f64)> {
    check_order(order)?;
    if knots.count < 2 * order {
        return Err(Error::Argument(format!(
            "{} knots cannot hold an order-{order} segment",
            knots.count
        )));
    }
    let (start, end) = knots.valid_domain(order);
    if !(t >= start && t <= end) {
        return Err(Error::Domain { t, start, end });
    }
    let last = knots.count - order - 1;
    if t == end {
        return Ok((last, 1.0));
    }
    let s = (t - knots.knot(0)) / knots.dt;
    let mut j = (s.floor().max(0.0) as usize).clamp(order - 1, last);
    if j < last && knots.knot(j + 1) <= t {
        j += 1;
    }
    if j > order - 1 && knots.knot(j) > t {
        j -= 1;
    }
    let u = ((t - knots.knot(j)) / knots.dt).clamp(0.0, 1.0);
    Ok((j, u))
}

/// `B_{j,k}(t)` by the Cox–de Boor recursion.
pub fn basis_weight(knots: &KnotGrid, j: usize, order: usize, t: f64) -> Result<f64> {
    let (interval, _) = segment_of(knots, order, t)?;
    let n_ctrl = knots.count - order;
    if j >= n_ctrl {
        return Err(Error::Index {
            index: j,
            len: n_ctrl,
        });
    }
    Ok(cox_de_boor(knots, j, order, t, interval))
}

fn cox_de_boor(knots: &KnotGrid, j: usize, k: usize, t: f64, interval: usize) -> f64 {
    if k == 1 {
        return if j == interval { 1.0 } else { 0.0 };
    }
    let tj = knots.knot(j);
    let tjk = knots.knot(j + k);
    let left = (t - tj) / (knots.knot(j + k - 1) - tj);
    let right = (tjk - t) / (tjk - knots.knot(j + 1));
    left * cox_de_boor(knots, j, k - 1, t, interval)
        + right * cox_de_boor(knots, j + 1, k - 1, t, interval)
}

/// Constant `k × k` matrix mapping `(1, u, …, u^{k-1})` to the weights of the
/// `k` active control points of a uniform segment. Row index = control point,
/// column index = power of `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMatrix {
    order: usize,
    entries: [[f64; MAX_ORDER]; MAX_ORDER],
}

impl BlendMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.order && col < self.order);
        self.entries[row][col]
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

pub fn blend_matrix_uniform(order: usize) -> Result<BlendMatrix> {
    check_order(order)?;
    let k = order;
    let mut entries = [[0.0; MAX_ORDER]; MAX_ORDER];
    let norm = factorial(k - 1);
    for (i, row) in entries.iter_mut().enumerate().take(k) {
        for (j, entry) in row.iter_mut().enumerate().take(k) {
            let mut sum = 0.0;
            for s in i..k {
                let sign = if (s - i) % 2 == 0 { 1.0 } else { -1.0 };
                // 0^0 = 1 through powi
                sum += sign * binomial(k, s - i) * ((k - 1 - s) as f64).powi((k - 1 - j) as i32);
            }
            *entry = binomial(k - 1, j) / norm * sum;
        }
    }
    Ok(BlendMatrix { order, entries })
}

/// Weights of the active control points `first .. first + order` at one time.
#[derive(Debug, Clone, Copy)]
pub struct SegmentWeights {
    pub first: usize,
    pub order: usize,
    pub values: [f64; MAX_ORDER],
}

impl SegmentWeights {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values[..self.order]
            .iter()
            .enumerate()
            .map(move |(i, &w)| (self.first + i, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorSpline {
    order: usize,
    dim: usize,
    knots: KnotGrid,
    blend: BlendMatrix,
    control_points: Vec<f64>,
}

impl VectorSpline {
    /// `control_points` is row-major `N × dim` with `N = knots.count() - order`.
    pub fn new(order: usize, dim: usize, knots: KnotGrid, control_points: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        if dim == 0 {
            return Err(Error::Argument("spline dimension must be positive".into()));
        }
        if knots.count < 2 * order {
            return Err(Error::Argument(format!(
                "order {order} needs at least {} knots, got {}",
                2 * order,
                knots.count
            )));
        }
        let n = knots.count - order;
        if control_points.len() != n * dim {
            return Err(Error::Argument(format!(
                "expected {} control-point values, got {}",
                n * dim,
                control_points.len()
            )));
        }
        Ok(Self {
            order,
            dim,
            knots,
            blend: blend_matrix_uniform(order)?,
            control_points,
        })
    }

    pub fn zeros(order: usize, dim: usize, knots: KnotGrid) -> Result<Self> {
        let n = knots.count.saturating_sub(order);
        Self::new(order, dim, knots, vec![0.0; n * dim])
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self) -> &KnotGrid {
        &self.knots
    }

    pub fn num_control_points(&self) -> usize {
        self.knots.count - self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        self.knots.valid_domain(self.order)
    }

    pub fn contains(&self, t: f64) -> bool {
        let (a, b) = self.domain();
        t >= a && t <= b
    }

    pub fn control_point(&self, i: usize) -> &[f64] {
        &self.control_points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn control_point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.control_points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn control_points(&self) -> &[f64] {
        &self.control_points
    }

    pub fn control_points_mut(&mut self) -> &mut [f64] {
        &mut self.control_points
    }

    /// Moves every knot by `offset`; the represented curve is translated in time.
    pub fn shift_time(&mut self, offset: f64) {
        self.knots = self.knots.shifted(offset);
    }

    /// Basis weights of the `derivative`-th time derivative at `t`.
    pub fn weights(&self, t: f64, derivative: usize) -> Result<SegmentWeights> {
        if derivative >= self.order {
            return Err(Error::Argument(format!(
                "derivative order {derivative} must be below spline order {}",
                self.order
            )));
        }
        let (j, u) = segment_of(&self.knots, self.order, t)?;
        Ok(self.weights_at(j, u, derivative))
    }

    /// Weights for derivative orders `0..=max_derivative` sharing one segment lookup.
    pub fn weights_upto<const R: usize>(&self, t: f64) -> Result<[SegmentWeights; R]> {
        if R == 0 || R > self.order {
            return Err(Error::Argument(format!(
                "cannot take {R} derivative orders of an order-{} spline",
                self.order
            )));
        }
        let (j, u) = segment_of(&self.knots, self.order, t)?;
        Ok(std::array::from_fn(|r| self.weights_at(j, u, r)))
    }

    fn weights_at(&self, interval: usize, u: f64, derivative: usize) -> SegmentWeights {
        let k = self.order;
        let mut powers = [0.0; MAX_ORDER];
        // d^r/du^r u^p = p!/(p-r)! u^(p-r)
        let scale = self.knots.dt.powi(-(derivative as i32));
        for (p, slot) in powers.iter_mut().enumerate().take(k).skip(derivative) {
            let falling: f64 = ((p - derivative + 1)..=p).map(|x| x as f64).product();
            *slot = falling * u.powi((p - derivative) as i32) * scale;
        }
        let mut values = [0.0; MAX_ORDER];
        for (i, v) in values.iter_mut().enumerate().take(k) {
            let row = &self.blend.entries[i];
            *v = (derivative..k).map(|p| row[p] * powers[p]).sum();
        }
        SegmentWeights {
            first: interval + 1 - k,
            order: k,
            values,
        }
    }

    pub fn evaluate_into(&self, t: f64, derivative: usize, out: &mut [f64]) -> Result<()> {
        assert_eq!(out.len(), self.dim);
        let w = self.weights(t, derivative)?;
        self.combine(&w, out);
        Ok(())
    }

    pub fn evaluate(&self, t: f64, derivative: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(t, derivative, &mut out)?;
        Ok(out)
    }

    /// `Σ w_i v_i` for precomputed weights.
    pub fn combine(&self, weights: &SegmentWeights, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (i, w) in weights.iter() {
            for (o, c) in out.iter_mut().zip(self.control_point(i)) {
                *o += w * c;
            }
        }
    }
}

/// Least-squares spline through `(t, value)` samples with a curvature penalty
/// `smoothing · ∫ ‖v''(t)‖² dt` over the valid domain.
pub fn fit_least_squares(
    samples: &[(f64, Vec<f64>)],
    order: usize,
    knots: KnotGrid,
    smoothing: f64,
) -> Result<VectorSpline> {
    check_order(order)?;
    if !(smoothing >= 0.0) {
        return Err(Error::Argument(format!("smoothing weight must be >= 0, got {smoothing}")));
    }
    let dim = samples
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| Error::InsufficientData("no samples to fit".into()))?;
    if samples.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::Argument("samples must be sorted by time".into()));
    }
    let template = VectorSpline::zeros(order, dim, knots)?;
    let n = template.num_control_points();
    let mut normal = SkylineMatrix::banded(n, order - 1);
    let mut rhs = vec![0.0; n * dim];

    for (t, value) in samples {
        if value.len() != dim {
            return Err(Error::Argument(format!(
                "sample at t = {t} has dimension {}, expected {dim}",
                value.len()
            )));
        }
        let w = template.weights(*t, 0)?;
        for (a, wa) in w.iter() {
            for (b, wb) in w.iter().filter(|(b, _)| *b <= a) {
                normal.add(a, b, wa * wb);
            }
            for (d, y) in value.iter().enumerate() {
                rhs[a * dim + d] += wa * y;
            }
        }
    }
    if smoothing > 0.0 {
        let dt = knots.dt();
        // Four-point Gauss-Legendre is exact for the squared second derivative.
        const NODES: [(f64, f64); 4] = [
            (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
            (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        ];
        for interval in (order - 1)..(knots.count() - order) {
            for (x, weight) in NODES {
                let t = knots.knot(interval) + 0.5 * dt * (1.0 + x);
                let scale = smoothing * 0.5 * dt * weight;
                let w = template.weights(t, 2.min(order - 1))?;
                for (a, wa) in w.iter() {
                    for (b, wb) in w.iter().filter(|(b, _)| *b <= a) {
                        normal.add(a, b, scale * wa * wb);
                    }
                }
            }
        }
    }
    normal.factorize(1e-12).map_err(|_| {
        Error::Rank(format!(
            "{} samples do not determine {n} control points (smoothing = {smoothing})",
            samples.len()
        ))
    })?;

    let mut column = vec![0.0; n];
    let mut control_points = vec![0.0; n * dim];
    for d in 0..dim {
        for i in 0..n {
            column[i] = rhs[i * dim + d];
        }
        normal.solve_in_place(&mut column);
        for i in 0..n {
            control_points[i * dim + d] = column[i];
        }
    }
    VectorSpline::new(order, dim, knots, control_points)
}
