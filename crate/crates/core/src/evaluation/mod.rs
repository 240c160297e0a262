//! Rotated BEV IoU, greedy matching, average precision and checkpoint reports.

mod ap;
mod iou;
mod report;

pub use ap::{average_precision, match_frame, MatchResult};
pub use iou::{bev_intersection_area, bev_iou};
pub use report::{
    detect_all, evaluate, evaluate_model, in_range, matches_csv, score_detections, EvalReport, FrameDetections,
    ThresholdAp,
};
