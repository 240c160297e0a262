//! Greedy matching and all-point interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3;

use super::iou::bev_iou;

/// Outcome of matching one frame's predictions against its ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(score, is_true_positive)` in descending score order.
    pub predictions: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.predictions.iter().filter(|p| p.1).count()
    }
}

/// Matches predictions to ground truth greedily by descending score.
///
/// Each prediction takes the unmatched ground truth with the highest IoU, provided
/// that IoU reaches `iou_thresh`. Equal scores keep their input order.
pub fn match_frame(preds: &[Box3], gts: &[Box3], iou_thresh: f64) -> Result<MatchResult> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = preds[a].score.unwrap_or(0.0);
        let sb = preds[b].score.unwrap_or(0.0);
        sb.total_cmp(&sa)
    });
    let mut taken = vec![false; gts.len()];
    let mut predictions = Vec::with_capacity(preds.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = bev_iou(&preds[i], gt)?;
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        predictions.push((preds[i].score.unwrap_or(0.0), best.is_some()));
    }
    Ok(MatchResult {
        predictions,
        num_gt: gts.len(),
    })
}

/// Area under the monotone precision envelope over all pooled predictions.
pub fn average_precision(results: &[MatchResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Undefined("average precision needs at least one frame".into()));
    }
    let num_gt: usize = results.iter().map(|r| r.num_gt).sum();
    if num_gt == 0 {
        return Err(Error::Undefined(
            "average precision is undefined without ground-truth boxes".into(),
        ));
    }
    let mut pooled: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| r.predictions.iter().copied())
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut recall = Vec::with_capacity(pooled.len());
    let mut precision = Vec::with_capacity(pooled.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in pooled.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}
