//! Ego-relative positional channels appended to every agent's feature map.

use serde::{Deserialize, Serialize};

use super::grid::GridConfig;
use super::model::BevFeatureMap;
use crate::error::Result;
use crate::nn::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// `(dx / x_max, dy / y_max)` of the cell center.
    Offset,
    /// `(r / r_max, 0)` with `r` the planar distance to the ego origin.
    Distance,
}

/// Positional channels of an ego-frame point.
pub fn positional_value(grid: &GridConfig, mode: PositionalMode, x: f64, y: f64) -> [f64; 2] {
    match mode {
        PositionalMode::Offset => [x / grid.x_max(), y / grid.y_max()],
        PositionalMode::Distance => [x.hypot(y) / grid.x_max().hypot(grid.y_max()), 0.0],
    }
}

/// `[2, H, W]` positional channels over the feature grid; depends on grid geometry only.
pub fn positional_encoding(grid: &GridConfig, mode: PositionalMode) -> Tensor {
    let (h, w) = (grid.feat_h(), grid.feat_w());
    let mut data = vec![0.0; 2 * h * w];
    for iy in 0..h {
        for ix in 0..w {
            let (x, y) = grid.feat_center(iy, ix);
            let v = positional_value(grid, mode, x, y);
            data[iy * w + ix] = v[0];
            data[h * w + iy * w + ix] = v[1];
        }
    }
    Tensor::from_vec(&[2, h, w], data).expect("shape matches")
}

/// Concatenates the positional channels onto a feature variable: `[C, H, W] -> [C + 2, H, W]`.
pub fn append_positional(g: &mut Graph, features: Var, encoding: &Tensor) -> Result<Var> {
    let pe = g.input(encoding.clone());
    g.concat(features, pe)
}

/// A `[C + 2, H, W]` feature map carrying the positional channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatureMap {
    pub data: Tensor,
    pub grid: GridConfig,
}

pub fn append_positional_encoding(f: &BevFeatureMap, mode: PositionalMode) -> Result<EncodedFeatureMap> {
    let mut g = Graph::new();
    let x = g.input(f.data.clone());
    let out = append_positional(&mut g, x, &positional_encoding(&f.grid, mode))?;
    Ok(EncodedFeatureMap {
        data: g.value(out).clone(),
        grid: f.grid,
    })
}
