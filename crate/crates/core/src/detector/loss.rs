//! Source-domain detection loss: focal classification plus Smooth-L1 localisation.

use serde::{Deserialize, Serialize};

use super::network::HeadVars;
use super::targets::AnchorTargets;
use crate::error::Result;
use crate::nn::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub loc: Var,
}

/// `L_cls + L_loc` for one sample. Classification is normalised by the
/// positive count (at least 1); localisation is averaged over positives.
pub fn detection_loss(g: &mut Graph, head: HeadVars, targets: &AnchorTargets, cfg: &LossConfig) -> Result<DetectionLoss> {
    let norm = targets.num_positive.max(1) as f64;
    let focal = g.focal_loss(head.cls, &targets.labels, cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = g.scale(focal, 1.0 / norm);
    let weights: Vec<f64> = targets.residual_mask.iter().map(|m| m / norm).collect();
    let loc = g.smooth_l1(head.reg, &targets.residuals, &weights, cfg.smooth_l1_beta)?;
    let total = g.add(cls, loc)?;
    Ok(DetectionLoss { total, cls, loc })
}
