use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::GridConfig;
use crate::geometry::PointCloud;

/// Number of per-point input features fed to the pillar network.
pub const POINT_FEATURES: usize = 6;

/// Points grouped into occupied pillars, ordered by flat pillar index.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillars {
    /// Flat pillar index `iy * pillar_w + ix` of each occupied pillar.
    pub cells: Vec<usize>,
    /// Row ranges into `features`: pillar `s` owns rows `offsets[s]..offsets[s + 1]`.
    pub offsets: Vec<usize>,
    /// Row-major `[n_points, POINT_FEATURES]`.
    pub features: Vec<f64>,
}

impl Pillars {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0)
    }
}

/// Groups in-range points into pillars, capping each pillar at `max_points`
/// with a seeded random subsample.
pub fn pillarize(cloud: &PointCloud, grid: &GridConfig, max_points: usize, seed: u64) -> Pillars {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let pw = grid.pillar_w();
    for (i, p) in cloud.points.iter().enumerate() {
        if let Some((iy, ix)) = grid.pillar_index(p[0], p[1], p[2]) {
            groups.entry(iy * pw + ix).or_default().push(i);
        }
    }
    let mut cells = Vec::with_capacity(groups.len());
    let mut offsets = vec![0];
    let mut features = Vec::new();
    for (cell, mut idx) in groups {
        if idx.len() > max_points.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            idx.shuffle(&mut rng);
            idx.truncate(max_points.max(1));
            idx.sort_unstable();
        }
        let (cx, cy) = grid.pillar_center(cell / pw, cell % pw);
        for &i in &idx {
            let p = cloud.points[i];
            features.extend_from_slice(&[
                p[0] / grid.x_max(),
                p[1] / grid.y_max(),
                p[2],
                p[3],
                (p[0] - cx) / grid.cell,
                (p[1] - cy) / grid.cell,
            ]);
        }
        cells.push(cell);
        offsets.push(offsets.last().unwrap() + idx.len());
    }
    Pillars {
        cells,
        offsets,
        features,
    }
}
