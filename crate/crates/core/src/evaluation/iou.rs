//! Rotated bird's-eye-view IoU.
//!
//! The intersection polygon of two convex footprints is assembled from the
//! corners of each box lying inside the other plus all pairwise edge
//! crossings, ordered by angle around their centroid.

use crate::error::{Error, Result};
use crate::geometry::Box3;

const EPS: f64 = 1e-12;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Inclusive point-in-convex-polygon test for counter-clockwise vertices.
fn inside(poly: &[[f64; 2]; 4], p: [f64; 2]) -> bool {
    let scale = poly
        .iter()
        .flat_map(|v| v.iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    (0..4).all(|i| cross(poly[i], poly[(i + 1) % 4], p) >= -EPS * scale * scale)
}

fn segment_intersection(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> Option<[f64; 2]> {
    let r = [p2[0] - p1[0], p2[1] - p1[1]];
    let s = [q2[0] - q1[0], q2[1] - q1[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < EPS {
        return None;
    }
    let qp = [q1[0] - p1[0], q1[1] - p1[1]];
    let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
    let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
    if (-EPS..=1.0 + EPS).contains(&t) && (-EPS..=1.0 + EPS).contains(&u) {
        Some([p1[0] + t * r[0], p1[1] + t * r[1]])
    } else {
        None
    }
}

fn polygon_area(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    acc.abs() / 2.0
}

/// Area of the overlap between two box footprints.
pub fn bev_intersection_area(a: &Box3, b: &Box3) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(24);
    pts.extend(pa.iter().copied().filter(|&p| inside(&pb, p)));
    pts.extend(pb.iter().copied().filter(|&p| inside(&pa, p)));
    for i in 0..4 {
        for j in 0..4 {
            if let Some(x) = segment_intersection(pa[i], pa[(i + 1) % 4], pb[j], pb[(j + 1) % 4]) {
                pts.push(x);
            }
        }
    }
    if pts.len() < 3 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    pts.sort_by(|p, q| {
        let ap = (p[1] - cy).atan2(p[0] - cx);
        let aq = (q[1] - cy).atan2(q[0] - cx);
        ap.total_cmp(&aq)
    });
    polygon_area(&pts)
}

/// Intersection over union of two rotated footprints, in `[0, 1]`.
pub fn bev_iou(a: &Box3, b: &Box3) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.size[0] > 0.0 && bx.size[1] > 0.0) || !bx.bev_area().is_finite() {
            return Err(Error::Invariant(format!(
                "degenerate box footprint {:?}",
                &bx.size[..2]
            )));
        }
    }
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let ra = a.size[0].hypot(a.size[1]) / 2.0;
    let rb = b.size[0].hypot(b.size[1]) / 2.0;
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return Ok(0.0);
    }
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
