//! Anchor layout and the residual box encoding.
//!
//! Anchor `a` at feature cell `(iy, ix)` has flat index `a * H * W + iy * W + ix`;
//! its seven regression channels are `a * 7 .. a * 7 + 7`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::grid::GridConfig;
use crate::geometry::{normalize_angle, Box3};

pub const BOX_CODE: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// (length, width, height) of every anchor.
    pub size: [f64; 3],
    /// Ego-frame z of anchor centers.
    pub z: f64,
    pub yaws: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            size: [4.5, 1.9, 1.6],
            z: -1.0,
            yaws: vec![0.0, FRAC_PI_2],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.yaws.len()
    }
}

/// All anchors of the feature grid in flat-index order.
pub fn generate_anchors(grid: &GridConfig, cfg: &AnchorConfig) -> Vec<Box3> {
    let (h, w) = (grid.feat_h(), grid.feat_w());
    let mut out = Vec::with_capacity(cfg.per_cell() * h * w);
    for &yaw in &cfg.yaws {
        for iy in 0..h {
            for ix in 0..w {
                let (x, y) = grid.feat_center(iy, ix);
                out.push(Box3::new([x, y, cfg.z], cfg.size, yaw));
            }
        }
    }
    out
}

/// Heading difference folded into `(-pi/2, pi/2]`; footprints are symmetric under a half turn.
fn folded_yaw_delta(yaw: f64, anchor_yaw: f64) -> f64 {
    let mut d = normalize_angle(yaw - anchor_yaw);
    if d > FRAC_PI_2 {
        d -= PI;
    } else if d <= -FRAC_PI_2 {
        d += PI;
    }
    d
}

/// Residuals of `gt` relative to `anchor`.
pub fn encode_box(gt: &Box3, anchor: &Box3) -> [f64; BOX_CODE] {
    let diag = anchor.size[0].hypot(anchor.size[1]);
    [
        (gt.center[0] - anchor.center[0]) / diag,
        (gt.center[1] - anchor.center[1]) / diag,
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
        folded_yaw_delta(gt.yaw, anchor.yaw).sin(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(code: &[f64], anchor: &Box3) -> Box3 {
    let diag = anchor.size[0].hypot(anchor.size[1]);
    Box3::new(
        [
            anchor.center[0] + code[0] * diag,
            anchor.center[1] + code[1] * diag,
            anchor.center[2] + code[2] * anchor.size[2],
        ],
        [
            anchor.size[0] * code[3].exp(),
            anchor.size[1] * code[4].exp(),
            anchor.size[2] * code[5].exp(),
        ],
        anchor.yaw + code[6].clamp(-1.0, 1.0).asin(),
    )
}
