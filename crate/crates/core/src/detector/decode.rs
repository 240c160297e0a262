//! Turning head outputs into scored boxes.

use serde::{Deserialize, Serialize};

use super::anchors::{decode_box, BOX_CODE};
use super::model::HeadOutput;
use crate::error::{Error, Result};
use crate::evaluation::bev_iou;
use crate::geometry::{Box3, BoxSet};
use crate::nn::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates kept before suppression.
    pub max_candidates: usize,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            nms_iou: 0.1,
            max_candidates: 500,
            max_detections: 100,
        }
    }
}

/// Greedy non-maximum suppression; `boxes` must carry scores. Output is sorted by descending score.
pub fn nms(mut boxes: Vec<Box3>, iou_thresh: f64, max_keep: usize) -> Result<BoxSet> {
    boxes.sort_by(|a, b| b.score.unwrap_or(0.0).total_cmp(&a.score.unwrap_or(0.0)));
    let mut keep: Vec<Box3> = Vec::new();
    for b in boxes {
        if keep.len() >= max_keep {
            break;
        }
        let mut suppressed = false;
        for k in &keep {
            if bev_iou(k, &b)? > iou_thresh {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(b);
        }
    }
    Ok(keep)
}

pub fn decode_boxes(out: &HeadOutput, anchors: &[Box3], cfg: &DecodeConfig) -> Result<BoxSet> {
    let cls = out.cls_logits.data();
    let reg = out.box_deltas.data();
    if cls.len() != anchors.len() || reg.len() != anchors.len() * BOX_CODE {
        return Err(Error::Shape(format!(
            "head output has {} logits for {} anchors",
            cls.len(),
            anchors.len()
        )));
    }
    let a = out.cls_logits.shape()[0];
    let hw = cls.len() / a.max(1);
    let mut cand: Vec<(f64, usize)> = cls
        .iter()
        .enumerate()
        .map(|(k, &l)| (sigmoid(l), k))
        .filter(|&(s, _)| s >= cfg.score_threshold)
        .collect();
    cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    cand.truncate(cfg.max_candidates);
    let mut boxes = Vec::with_capacity(cand.len());
    for (score, k) in cand {
        let (ai, cell) = (k / hw, k % hw);
        let code: Vec<f64> = (0..BOX_CODE).map(|d| reg[(ai * BOX_CODE + d) * hw + cell]).collect();
        let b = decode_box(&code, &anchors[k]);
        if b.validate().is_ok() {
            boxes.push(b.with_score(score));
        }
    }
    nms(boxes, cfg.nms_iou, cfg.max_detections)
}

/// Per-cell detection confidence: the largest anchor probability, `[H, W]`.
pub fn confidence_map(out: &HeadOutput) -> Tensor {
    let shape = out.cls_logits.shape();
    let (a, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let cls = out.cls_logits.data();
    let data = (0..hw)
        .map(|u| (0..a).map(|ai| sigmoid(cls[ai * hw + u])).fold(0.0, f64::max))
        .collect();
    Tensor::from_vec(&[h, w], data).expect("shape matches")
}
