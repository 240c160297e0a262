//! Rigid transforms, point clouds, oriented boxes and ego-frame projection.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RIGID_TOL: f64 = 1e-9;

/// A rigid transform in SE(3), stored as a row-major homogeneous 4x4 matrix.
///
/// A pose maps agent coordinates into world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    matrix: [[f64; 4]; 4],
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose { matrix: m }
    }

    /// Builds a pose from a 4x4 matrix, rejecting anything that is not rigid.
    pub fn new(matrix: [[f64; 4]; 4]) -> Result<Self> {
        let pose = Pose { matrix };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        let mut p = Self::identity();
        p.matrix[0][3] = x;
        p.matrix[1][3] = y;
        p.matrix[2][3] = z;
        p
    }

    /// Rotation `Rz(yaw) * Ry(pitch) * Rx(roll)` followed by a translation.
    ///
    /// Positive pitch tilts the +x axis upwards (towards +z).
    pub fn from_euler(translation: [f64; 3], roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = roll.sin_cos();
        // rotation about +y by -pitch so that positive pitch raises the x axis
        let (sp, cp) = (-pitch).sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
        let ry = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
        let r = mat3_mul(&mat3_mul(&rz, &ry), &rx);
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = translation[i];
        }
        m[3][3] = 1.0;
        Pose { matrix: m }
    }

    pub fn from_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::from_euler([x, y, z], 0.0, 0.0, yaw)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    /// Heading of the transformed +x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        self.matrix[1][0].atan2(self.matrix[0][0])
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("pose contains non-finite entries".into()));
        }
        let last = [0.0, 0.0, 0.0, 1.0];
        if m[3].iter().zip(last).any(|(a, b)| (a - b).abs() > RIGID_TOL) {
            return Err(Error::Invariant("pose last row must be (0, 0, 0, 1)".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > RIGID_TOL {
                    return Err(Error::Invariant(format!(
                        "pose rotation is not orthonormal (R^T R [{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if (det - 1.0).abs() > RIGID_TOL {
            return Err(Error::Invariant(format!("pose rotation determinant is {det}, expected +1")));
        }
        Ok(())
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.matrix[i][k] * other.matrix[k][j]).sum();
            }
        }
        Pose { matrix: m }
    }

    /// Closed-form rigid inverse `[R^T | -R^T t]`.
    pub fn inverse(&self) -> Result<Pose> {
        self.validate()?;
        let m = &self.matrix;
        let mut inv = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = m[j][i];
            }
            inv[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
        }
        inv[3][3] = 1.0;
        Ok(Pose { matrix: inv })
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    pub fn rotate_vector(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
        }
        out
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for i in 0..4 {
            out[i * 4..i * 4 + 4].copy_from_slice(&self.matrix[i]);
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Pose> {
        if values.len() != 16 {
            return Err(Error::Invariant(format!(
                "pose needs 16 values, got {}",
                values.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            m[i].copy_from_slice(&values[i * 4..i * 4 + 4]);
        }
        Pose::new(m)
    }
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Inverse of a rigid pose.
pub fn pose_inverse(p: &Pose) -> Result<Pose> {
    p.inverse()
}

/// A LiDAR sweep: rows of `(x, y, z, intensity)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        let cloud = PointCloud { points };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn empty() -> Self {
        PointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("point {i} is not finite")));
            }
            if !(0.0..=1.0).contains(&p[3]) {
                return Err(Error::Invariant(format!(
                    "point {i} has intensity {} outside [0, 1]",
                    p[3]
                )));
            }
        }
        Ok(())
    }

    /// Applies a rigid transform to the coordinates; intensity is carried through.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = pose.transform_point([p[0], p[1], p[2]]);
                [q[0], q[1], q[2], p[3]]
            })
            .collect();
        PointCloud { points }
    }
}

/// Expresses a cloud captured at `t_agent` in the frame of `t_ego`: `T_ego^-1 T_agent P`.
pub fn project_to_ego(cloud: &PointCloud, t_agent: &Pose, t_ego: &Pose) -> Result<PointCloud> {
    t_agent.validate()?;
    let rel = t_ego.inverse()?.compose(t_agent);
    Ok(cloud.transformed(&rel))
}

/// Wraps an angle to `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// An oriented 3D box. Yaw is counter-clockwise from +x in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    /// (length, width, height); length runs along the heading.
    pub size: [f64; 3],
    pub yaw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub type BoxSet = Vec<Box3>;

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Box3 {
            center,
            size,
            yaw: normalize_angle(yaw),
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.center.iter().chain(&self.size).any(|v| !v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::Invariant("box has non-finite fields".into()));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Invariant(format!(
                "box size must be positive, got {:?}",
                self.size
            )));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Invariant(format!("box score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| {
            [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
            ]
        })
    }

    /// All eight corners, bottom face first.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let bev = self.bev_corners();
        let hh = self.size[2] / 2.0;
        let mut out = [[0.0; 3]; 8];
        for (i, c) in bev.iter().enumerate() {
            out[i] = [c[0], c[1], self.center[2] - hh];
            out[i + 4] = [c[0], c[1], self.center[2] + hh];
        }
        out
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// True when a world point is inside the box (closed).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.size[0] / 2.0
            && ly.abs() <= self.size[1] / 2.0
            && (p[2] - self.center[2]).abs() <= self.size[2] / 2.0
    }
}

/// Re-expresses boxes given in the frame of `t_from` in the frame of `t_to`.
///
/// Centers move as points; yaw picks up the planar rotation of the relative transform.
pub fn transform_boxes(boxes: &[Box3], t_from: &Pose, t_to: &Pose) -> Result<BoxSet> {
    t_from.validate()?;
    let rel = t_to.inverse()?.compose(t_from);
    let dyaw = rel.yaw();
    Ok(boxes
        .iter()
        .map(|b| Box3 {
            center: rel.transform_point(b.center),
            size: b.size,
            yaw: normalize_angle(b.yaw + dyaw),
            score: b.score,
        })
        .collect())
}
