//! Checkpoint evaluation over a labelled dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ap::{average_precision, match_frame, MatchResult};
use crate::error::{Error, Result};
use crate::geometry::{Box3, BoxSet};
use crate::detector::GridConfig;
use crate::synthgen::Dataset;
use crate::training::{load_checkpoint, load_prepared, predict, Model, PreparedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub ap: Vec<ThresholdAp>,
    pub frames: usize,
    pub gts: usize,
    pub preds: usize,
}

impl EvalReport {
    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        self.ap.iter().find(|t| t.iou == iou).map(|t| t.ap)
    }
}

/// Per-frame predictions and in-range ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub preds: BoxSet,
    pub gts: BoxSet,
}

/// Ground-truth boxes whose centre lies inside the detection range.
pub fn in_range(gts: &[Box3], grid: &GridConfig) -> BoxSet {
    gts.iter()
        .filter(|b| {
            (grid.x_range[0]..grid.x_range[1]).contains(&b.center[0])
                && (grid.y_range[0]..grid.y_range[1]).contains(&b.center[1])
        })
        .copied()
        .collect()
}

/// Frozen inference on every sample, paired with its filtered ground truth.
pub fn detect_all(model: &Model, samples: &[PreparedSample]) -> Result<Vec<FrameDetections>> {
    samples
        .iter()
        .map(|s| {
            Ok(FrameDetections {
                preds: predict(model, s)?,
                gts: in_range(s.boxes()?, model.detector.grid()),
            })
        })
        .collect()
}

/// AP per threshold over precomputed detections.
pub fn score_detections(frames: &[FrameDetections], thresholds: &[f64]) -> Result<(EvalReport, Vec<Vec<MatchResult>>)> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one IoU threshold is required".into()));
    }
    let mut ap = Vec::with_capacity(thresholds.len());
    let mut all = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
        }
        let results = frames
            .iter()
            .map(|f| match_frame(&f.preds, &f.gts, t))
            .collect::<Result<Vec<_>>>()?;
        ap.push(ThresholdAp {
            iou: t,
            ap: average_precision(&results)?,
        });
        all.push(results);
    }
    let report = EvalReport {
        checkpoint: None,
        dataset: None,
        ap,
        frames: frames.len(),
        gts: frames.iter().map(|f| f.gts.len()).sum(),
        preds: frames.iter().map(|f| f.preds.len()).sum(),
    };
    Ok((report, all))
}

/// Evaluates an in-memory model on labelled samples.
pub fn evaluate_model(model: &Model, samples: &[PreparedSample], thresholds: &[f64]) -> Result<EvalReport> {
    Ok(score_detections(&detect_all(model, samples)?, thresholds)?.0)
}

/// `frame,iou,score,tp` rows of every matched prediction.
pub fn matches_csv(thresholds: &[f64], matches: &[Vec<MatchResult>]) -> String {
    let mut out = String::from("frame,iou,score,tp\n");
    for (t, results) in thresholds.iter().zip(matches) {
        for (i, r) in results.iter().enumerate() {
            for &(score, tp) in &r.predictions {
                let _ = writeln!(out, "{i},{t},{score},{}", u8::from(tp));
            }
        }
    }
    out
}

/// Evaluates the checkpoint in `ckpt` on the dataset at `data`, optionally writing the
/// per-frame match table to `csv`.
pub fn evaluate(ckpt: &Path, data: &Path, thresholds: &[f64], csv: Option<&Path>) -> Result<EvalReport> {
    let (model, _, _) = load_checkpoint(ckpt)?;
    let ds = Dataset::open(data)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!("{} has no frames to evaluate", data.display())));
    }
    if let Some(i) = (0..ds.len()).find(|&i| !ds.has_labels(i)) {
        return Err(Error::Dataset(format!(
            "frame {i} of {} has no labels.json; evaluation needs annotations even though adaptation does not",
            data.display()
        )));
    }
    let samples = load_prepared(&ds, ds.domain(), true)?;
    let (mut report, matches) = score_detections(&detect_all(&model, &samples)?, thresholds)?;
    report.checkpoint = Some(ckpt.to_path_buf());
    report.dataset = Some(data.to_path_buf());
    if let Some(p) = csv {
        fs::write(p, matches_csv(thresholds, &matches)).map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}
