use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the bird's-eye-view grid shared by every agent of a sample.
///
/// Rows run along y, columns along x. The pillar grid has `cell` sized
/// cells; the feature grid is the pillar grid downsampled by `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub cell: f64,
    pub stride: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            x_range: [-40.0, 40.0],
            y_range: [-40.0, 40.0],
            z_range: [-3.0, 1.0],
            cell: 0.8,
            stride: 2,
        }
    }
}

fn whole(span: f64, step: f64) -> Option<usize> {
    let n = span / step;
    let r = n.round();
    ((n - r).abs() < 1e-6 && r >= 1.0).then_some(r as usize)
}

impl GridConfig {
    /// Full-range grid used for large-scale runs.
    pub fn full_range() -> Self {
        GridConfig {
            x_range: [-102.4, 102.4],
            y_range: [-38.4, 38.4],
            z_range: [-3.5, 1.5],
            cell: 0.4,
            stride: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || self.stride == 0 {
            return Err(Error::Config("grid cell and stride must be positive".into()));
        }
        for (name, r) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(r[1] > r[0]) {
                return Err(Error::Config(format!("grid {name}_range must be increasing")));
            }
        }
        for (name, r) in [("x", self.x_range), ("y", self.y_range)] {
            let n = whole(r[1] - r[0], self.cell).ok_or_else(|| {
                Error::Config(format!("grid {name}_range is not divisible by cell {}", self.cell))
            })?;
            if n % self.stride != 0 {
                return Err(Error::Config(format!(
                    "grid {name} cell count {n} is not divisible by stride {}",
                    self.stride
                )));
            }
        }
        Ok(())
    }

    pub fn pillar_w(&self) -> usize {
        whole(self.x_range[1] - self.x_range[0], self.cell).unwrap_or(0)
    }

    pub fn pillar_h(&self) -> usize {
        whole(self.y_range[1] - self.y_range[0], self.cell).unwrap_or(0)
    }

    pub fn feat_w(&self) -> usize {
        self.pillar_w() / self.stride
    }

    pub fn feat_h(&self) -> usize {
        self.pillar_h() / self.stride
    }

    pub fn feat_cell(&self) -> f64 {
        self.cell * self.stride as f64
    }

    /// Pillar cell of a point using half-open `[lo, hi)` intervals, or `None` when outside.
    pub fn pillar_index(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range[0] && x < self.x_range[1])
            || !(y >= self.y_range[0] && y < self.y_range[1])
            || !(z >= self.z_range[0] && z < self.z_range[1])
        {
            return None;
        }
        let ix = cell_of(x, self.x_range[0], self.cell, self.pillar_w());
        let iy = cell_of(y, self.y_range[0], self.cell, self.pillar_h());
        Some((iy, ix))
    }

    pub fn pillar_center(&self, iy: usize, ix: usize) -> (f64, f64) {
        (
            self.x_range[0] + (ix as f64 + 0.5) * self.cell,
            self.y_range[0] + (iy as f64 + 0.5) * self.cell,
        )
    }

    /// Ego-frame center of a feature-grid cell.
    pub fn feat_center(&self, iy: usize, ix: usize) -> (f64, f64) {
        let c = self.feat_cell();
        (
            self.x_range[0] + (ix as f64 + 0.5) * c,
            self.y_range[0] + (iy as f64 + 0.5) * c,
        )
    }

    pub fn x_max(&self) -> f64 {
        self.x_range[0].abs().max(self.x_range[1].abs())
    }

    pub fn y_max(&self) -> f64 {
        self.y_range[0].abs().max(self.y_range[1].abs())
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_range[0] && x < self.x_range[1] && y >= self.y_range[0] && y < self.y_range[1]
    }
}

/// Cell index along one axis. Points within a relative `1e-9` of a cell boundary count as
/// lying on it, so decimal boundaries such as `0.8` land in the upper cell.
fn cell_of(v: f64, lo: f64, cell: f64, n: usize) -> usize {
    let k = ((v - lo) / cell + 1e-9).floor().max(0.0) as usize;
    k.min(n - 1)
}
