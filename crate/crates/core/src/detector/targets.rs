use serde::{Deserialize, Serialize};

use super::anchors::{encode_box, BOX_CODE};
use super::grid::GridConfig;
use crate::evaluation::bev_iou;
use crate::geometry::Box3;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            pos_iou: 0.6,
            neg_iou: 0.45,
        }
    }
}

/// Per-anchor classification labels and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    /// 1 positive, 0 negative, -1 ignored; one entry per anchor.
    pub labels: Vec<i8>,
    /// Residual targets laid out like the regression head output `[7A, H, W]`.
    pub residuals: Vec<f64>,
    /// 1 on the residual entries of positive anchors, 0 elsewhere.
    pub residual_mask: Vec<f64>,
    pub num_positive: usize,
}

/// Labels anchors against ground-truth boxes expressed in the ego frame.
///
/// An anchor is positive when its best IoU reaches `pos_iou` or when it is the
/// best anchor of some box; negative below `neg_iou`; ignored otherwise.
pub fn assign_targets(
    anchors: &[Box3],
    grid: &GridConfig,
    per_cell: usize,
    gts: &[Box3],
    cfg: &MatchingConfig,
) -> Result<AnchorTargets> {
    let n = anchors.len();
    let (h, w) = (grid.feat_h(), grid.feat_w());
    let hw = h * w;
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut forced: Vec<Option<usize>> = vec![None; n];
    let fc = grid.feat_cell();
    for (gi, gt) in gts.iter().enumerate() {
        let mut gt_best: Option<(usize, f64)> = None;
        let reach = gt.size[0].hypot(gt.size[1]) / 2.0
            + anchors.first().map_or(0.0, |a| a.size[0].hypot(a.size[1]) / 2.0);
        let ix0 = ((gt.center[0] - reach - grid.x_range[0]) / fc).floor().max(0.0) as usize;
        let ix1 = (((gt.center[0] + reach - grid.x_range[0]) / fc).ceil().max(0.0) as usize).min(w);
        let iy0 = ((gt.center[1] - reach - grid.y_range[0]) / fc).floor().max(0.0) as usize;
        let iy1 = (((gt.center[1] + reach - grid.y_range[0]) / fc).ceil().max(0.0) as usize).min(h);
        for a in 0..per_cell {
            for iy in iy0..iy1 {
                for ix in ix0..ix1 {
                    let k = a * hw + iy * w + ix;
                    let iou = bev_iou(&anchors[k], gt)?;
                    if iou > best_iou[k] {
                        best_iou[k] = iou;
                        best_gt[k] = gi;
                    }
                    if iou > 0.0 && gt_best.is_none_or(|(_, b)| iou > b) {
                        gt_best = Some((k, iou));
                    }
                }
            }
        }
        if let Some((k, _)) = gt_best {
            forced[k] = Some(gi);
        }
    }

    let mut labels = vec![0i8; n];
    let mut residuals = vec![0.0; n * BOX_CODE];
    let mut residual_mask = vec![0.0; n * BOX_CODE];
    let mut num_positive = 0;
    for k in 0..n {
        let assigned = if let Some(gi) = forced[k] {
            Some(gi)
        } else if best_iou[k] >= cfg.pos_iou {
            Some(best_gt[k])
        } else {
            None
        };
        match assigned {
            Some(gi) => {
                labels[k] = 1;
                num_positive += 1;
                let (a, cell) = (k / hw, k % hw);
                let code = encode_box(&gts[gi], &anchors[k]);
                for (d, v) in code.iter().enumerate() {
                    let idx = (a * BOX_CODE + d) * hw + cell;
                    residuals[idx] = *v;
                    residual_mask[idx] = 1.0;
                }
            }
            None if best_iou[k] >= cfg.neg_iou => labels[k] = -1,
            None => labels[k] = 0,
        }
    }
    Ok(AnchorTargets {
        labels,
        residuals,
        residual_mask,
        num_positive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::anchors::{generate_anchors, AnchorConfig};

    #[test]
    fn box_on_an_anchor_is_positive() {
        let grid = GridConfig::default();
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg);
        let k = 20 * 50 + 30;
        let gt = anchors[k];
        let t = assign_targets(&anchors, &grid, 2, &[gt], &MatchingConfig::default()).unwrap();
        assert_eq!(t.labels[k], 1);
        assert!(t.num_positive >= 1);
        assert!(t.labels.iter().filter(|&&l| l == 0).count() > 4000);
        let hw = 2500;
        for d in 0..7 {
            assert_eq!(t.residuals[d * hw + k], 0.0);
            assert_eq!(t.residual_mask[d * hw + k], 1.0);
        }
    }

    #[test]
    fn no_boxes_all_negative() {
        let grid = GridConfig::default();
        let anchors = generate_anchors(&grid, &AnchorConfig::default());
        let t = assign_targets(&anchors, &grid, 2, &[], &MatchingConfig::default()).unwrap();
        assert_eq!(t.num_positive, 0);
        assert!(t.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn box_between_anchors_still_gets_its_best_anchor() {
        let grid = GridConfig::default();
        let anchors = generate_anchors(&grid, &AnchorConfig::default());
        let gt = Box3::new([0.55, 0.3, -1.0], [3.0, 1.5, 1.5], 0.7);
        let t = assign_targets(&anchors, &grid, 2, &[gt], &MatchingConfig::default()).unwrap();
        assert!(t.num_positive >= 1);
    }
}
