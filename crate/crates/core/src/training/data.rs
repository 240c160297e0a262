//! In-memory training samples, splits, sampling order and augmentation.

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3, BoxSet, PointCloud};
use crate::rng::stream;
use crate::sample::{AgentType, CollaborativeSample, Domain};
use crate::synthgen::Dataset;

/// One frame projected into the ego frame, ready for the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Ego-frame clouds, ego first.
    pub clouds: Vec<PointCloud>,
    pub agent_types: Vec<AgentType>,
    /// Ego-frame boxes; `None` when labels were not loaded.
    pub boxes: Option<BoxSet>,
    pub domain: Domain,
}

impl PreparedSample {
    pub fn from_sample(sample: &CollaborativeSample) -> Result<Self> {
        sample.validate()?;
        let ego = sample.ego_index();
        let mut order: Vec<usize> = vec![ego];
        order.extend((0..sample.agents.len()).filter(|&j| j != ego));
        let clouds = sample.clouds_in_ego()?;
        Ok(PreparedSample {
            clouds: order.iter().map(|&j| clouds[j].clone()).collect(),
            agent_types: order.iter().map(|&j| sample.agents[j].agent_type).collect(),
            boxes: sample.annotations_in_ego()?,
            domain: sample.domain,
        })
    }

    pub fn boxes(&self) -> Result<&BoxSet> {
        self.boxes
            .as_ref()
            .ok_or_else(|| Error::Dataset("sample has no annotations".into()))
    }
}

/// Loads every frame of `ds`. Labels are read only when `with_labels` is set.
pub fn load_prepared(ds: &Dataset, domain: Domain, with_labels: bool) -> Result<Vec<PreparedSample>> {
    (0..ds.len())
        .map(|i| PreparedSample::from_sample(&ds.load(i, domain, with_labels)?))
        .collect()
}

/// `(train, validation)` index split; validation is the last `fraction` of the frames.
pub fn split_indices(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).min(n - 1) };
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

/// Stream tags. Source-side tags do not depend on the training stage so that
/// pretraining and adaptation draw identical source batches.
pub mod tags {
    pub const SOURCE_ORDER: u64 = 0x50;
    pub const TARGET_ORDER: u64 = 0x51;
    pub const SOURCE_AUGMENT: u64 = 0x52;
    pub const TARGET_AUGMENT: u64 = 0x53;
    pub const DROPOUT: u64 = 0x54;
    pub const INIT: u64 = 0x55;
}

/// Seeded permutation of `items` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, tag: u64, items: &[usize]) -> Vec<usize> {
    let mut v = items.to_vec();
    v.shuffle(&mut stream(seed, &[tag, epoch as u64]));
    v
}

/// A global transform applied identically to points and boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform {
    pub yaw: f64,
    pub flip: bool,
    pub scale: f64,
}

impl GlobalTransform {
    pub const IDENTITY: GlobalTransform = GlobalTransform {
        yaw: 0.0,
        flip: false,
        scale: 1.0,
    };

    pub fn draw<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let m = cfg.max_yaw_deg.to_radians();
        let yaw = if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let flip = cfg.flip && rng.random_bool(0.5);
        let [s0, s1] = cfg.scale;
        let scale = if s1 > s0 { rng.random_range(s0..=s1) } else { s0 };
        GlobalTransform { yaw, flip, scale }
    }

    /// Flip about the x axis, then rotate about z, then scale.
    fn xy(&self, x: f64, y: f64) -> (f64, f64) {
        let y = if self.flip { -y } else { y };
        let (s, c) = self.yaw.sin_cos();
        (self.scale * (c * x - s * y), self.scale * (s * x + c * y))
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| {
                    let (x, y) = self.xy(p[0], p[1]);
                    [x, y, p[2] * self.scale, p[3]]
                })
                .collect(),
        }
    }

    pub fn apply_box(&self, b: &Box3) -> Box3 {
        let (x, y) = self.xy(b.center[0], b.center[1]);
        let yaw = if self.flip { -b.yaw } else { b.yaw } + self.yaw;
        Box3 {
            center: [x, y, b.center[2] * self.scale],
            size: [b.size[0] * self.scale, b.size[1] * self.scale, b.size[2] * self.scale],
            yaw: normalize_angle(yaw),
            score: b.score,
        }
    }

    pub fn apply(&self, s: &PreparedSample) -> PreparedSample {
        if *self == Self::IDENTITY {
            return s.clone();
        }
        PreparedSample {
            clouds: s.clouds.iter().map(|c| self.apply_cloud(c)).collect(),
            agent_types: s.agent_types.clone(),
            boxes: s.boxes.as_ref().map(|bs| bs.iter().map(|b| self.apply_box(b)).collect()),
            domain: s.domain,
        }
    }
}

/// Augmented copy of a sample drawn from the stream of `(epoch, step, slot)`.
pub fn augmented(s: &PreparedSample, cfg: &AugmentConfig, seed: u64, tag: u64, epoch: usize, step: usize, slot: usize) -> PreparedSample {
    let mut rng = stream(seed, &[tag, epoch as u64, step as u64, slot as u64]);
    GlobalTransform::draw(cfg, &mut rng).apply(s)
}
