//! Aprilgrid corner layout.
//!
//! Tag `(r, c)` has its origin at `(c, r) · tag_size · (1 + spacing_ratio)` in
//! the target plane `z = 0`. Its corners are numbered counterclockwise from
//! the origin and landmark ids are `4 · (r · cols + c) + corner`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub rows: usize,
    pub cols: usize,
    /// Tag edge length in meters.
    pub tag_size: f64,
    /// Gap between tags as a fraction of `tag_size`.
    pub spacing_ratio: f64,
}

const CORNER_OFFSETS: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];

impl TargetSpec {
    /// 6 × 6 grid of 88 mm tags, as in the common Kalibr board.
    pub fn aprilgrid_6x6() -> Self {
        Self {
            rows: 6,
            cols: 6,
            tag_size: 0.088,
            spacing_ratio: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!("target needs at least one tag, got {}x{}", self.rows, self.cols)));
        }
        if !(self.tag_size > 0.0) {
            return Err(Error::Config(format!("tag size must be positive, got {}", self.tag_size)));
        }
        if !(0.0..1.0).contains(&self.spacing_ratio) {
            return Err(Error::Config(format!("spacing ratio must be in [0, 1), got {}", self.spacing_ratio)));
        }
        Ok(())
    }

    pub fn num_landmarks(&self) -> usize {
        4 * self.rows * self.cols
    }

    fn pitch(&self) -> f64 {
        self.tag_size * (1.0 + self.spacing_ratio)
    }

    /// Width and height of the printed area.
    pub fn extent(&self) -> (f64, f64) {
        let pitch = self.pitch();
        (
            (self.cols - 1) as f64 * pitch + self.tag_size,
            (self.rows - 1) as f64 * pitch + self.tag_size,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        let (w, h) = self.extent();
        Vector3::new(0.5 * w, 0.5 * h, 0.0)
    }

    pub fn lookup(&self, landmark_id: usize) -> Result<Vector3<f64>> {
        if landmark_id >= self.num_landmarks() {
            return Err(Error::Index {
                index: landmark_id,
                len: self.num_landmarks(),
            });
        }
        let tag = landmark_id / 4;
        let (r, c) = (tag / self.cols, tag % self.cols);
        let (dx, dy) = CORNER_OFFSETS[landmark_id % 4];
        let pitch = self.pitch();
        Ok(Vector3::new(
            c as f64 * pitch + dx * self.tag_size,
            r as f64 * pitch + dy * self.tag_size,
            0.0,
        ))
    }

    pub fn landmarks(&self) -> Vec<(usize, Vector3<f64>)> {
        (0..self.num_landmarks())
            .map(|id| (id, self.lookup(id).expect("id in range")))
            .collect()
    }

    /// Landmark coordinates indexed by id.
    pub fn landmark_table(&self) -> Vec<Vector3<f64>> {
        self.landmarks().into_iter().map(|(_, p)| p).collect()
    }
}
