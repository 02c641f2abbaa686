//! Symmetric positive-definite systems stored in envelope (skyline) form.
//!
//! Row `i` keeps the lower-triangular entries from `first[i]` through the
//! diagonal. Cholesky factorization produces no fill outside that envelope,
//! so banded spline systems with a few dense trailing rows (the global
//! calibration parameters) factor in `O(n · bandwidth²)`.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SkylineMatrix {
    first: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineMatrix {
    /// `first[i]` is the leftmost stored column of row `i`; it must not exceed `i`.
    pub fn new(first: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(first.len() + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            assert!(f <= i, "envelope start {f} beyond diagonal of row {i}");
            offsets.push(total);
            total += i - f + 1;
        }
        offsets.push(total);
        Self {
            first,
            offsets,
            data: vec![0.0; total],
        }
    }

    /// Banded matrix with `bandwidth` sub-diagonals.
    pub fn banded(n: usize, bandwidth: usize) -> Self {
        Self::new((0..n).map(|i| i.saturating_sub(bandwidth)).collect())
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn stored_entries(&self) -> usize {
        self.data.len()
    }

    pub fn first(&self, row: usize) -> usize {
        self.first[row]
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && j >= self.first[i], "({i}, {j}) outside envelope");
        self.offsets[i] + (j - self.first[i])
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Adds `value` to the symmetric entry `(i, j)`; either triangle may be addressed.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        let k = self.index(i, j);
        self.data[k] += value;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.data[self.index(i, j)]
        }
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.data[self.offsets[i + 1] - 1]
    }

    pub fn set_diagonal(&mut self, i: usize, value: f64) {
        let k = self.offsets[i + 1] - 1;
        self.data[k] = value;
    }

    /// In-place Cholesky `A = L Lᵀ`. A pivot that is not positive, or that
    /// collapses below `relative_tolerance` times the original diagonal, is
    /// reported as a rank error naming the row.
    pub fn factorize(&mut self, relative_tolerance: f64) -> Result<()> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            let oi = self.offsets[i];
            for j in fi..i {
                let fj = self.first[j];
                let start = fi.max(fj);
                let oj = self.offsets[j];
                let mut s = self.data[oi + (j - fi)];
                let a = &self.data[oi + (start - fi)..oi + (j - fi)];
                let b = &self.data[oj + (start - fj)..oj + (j - fj)];
                s -= dot(a, b);
                let ljj = self.data[self.offsets[j + 1] - 1];
                self.data[oi + (j - fi)] = s / ljj;
            }
            let diag_idx = self.offsets[i + 1] - 1;
            let original = self.data[diag_idx];
            let row = &self.data[oi..diag_idx];
            let d = original - dot(row, row);
            if !(d > relative_tolerance * original.abs()) || !d.is_finite() {
                return Err(Error::Rank(format!(
                    "non-positive pivot {d:e} at row {i} of {n}"
                )));
            }
            self.data[diag_idx] = d.sqrt();
        }
        Ok(())
    }

    /// Solves `L Lᵀ x = b` in place, after [`factorize`](Self::factorize).
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        assert_eq!(b.len(), n);
        for i in 0..n {
            let fi = self.first[i];
            let row = self.row(i);
            let s = b[i] - dot(&row[..row.len() - 1], &b[fi..i]);
            b[i] = s / row[row.len() - 1];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = self.row(i);
            let xi = b[i] / row[row.len() - 1];
            b[i] = xi;
            for (k, l) in (fi..i).zip(row.iter()) {
                b[k] -= l * xi;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
