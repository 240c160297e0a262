use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{generate_anchors, AnchorConfig};
use super::decode::{decode_boxes, DecodeConfig};
use super::grid::GridConfig;
use super::loss::LossConfig;
use super::network::{DetectionHead, Fusion, FusionKind, HeadVars, PillarEncoder, ReduceMixFusion};
use super::positional::PositionalMode;
use super::targets::MatchingConfig;
use crate::error::{Error, Result};
use crate::geometry::{Box3, BoxSet, PointCloud};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::sample::CollaborativeSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub grid: GridConfig,
    pub pillar_channels: usize,
    /// Channel count `C` of every per-agent and fused feature map.
    pub channels: usize,
    pub max_points_per_pillar: usize,
    pub fusion: FusionKind,
    pub positional: PositionalMode,
    pub anchors: AnchorConfig,
    pub matching: MatchingConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            grid: GridConfig::default(),
            pillar_channels: 32,
            channels: 64,
            max_points_per_pillar: 32,
            fusion: FusionKind::Max,
            positional: PositionalMode::Offset,
            anchors: AnchorConfig::default(),
            matching: MatchingConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.channels == 0 || self.pillar_channels == 0 || self.max_points_per_pillar == 0 {
            return Err(Error::Config("detector widths must be positive".into()));
        }
        if self.anchors.yaws.is_empty() || self.anchors.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("anchors need at least one yaw and a positive size".into()));
        }
        if !(self.matching.neg_iou <= self.matching.pos_iou) {
            return Err(Error::Config("matching.neg_iou must not exceed matching.pos_iou".into()));
        }
        Ok(())
    }
}

/// A `[C, H, W]` bird's-eye-view feature map with its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub data: Tensor,
    pub grid: GridConfig,
}

/// Head outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `[A, H, W]`
    pub cls_logits: Tensor,
    /// `[7A, H, W]`
    pub box_deltas: Tensor,
}

impl HeadOutput {
    pub fn from_graph(g: &Graph, vars: HeadVars) -> Self {
        HeadOutput {
            cls_logits: g.value(vars.cls).clone(),
            box_deltas: g.value(vars.reg).clone(),
        }
    }
}

/// Intermediate-fusion collaborative detector.
#[derive(Debug)]
pub struct CollaborativeDetector {
    pub config: DetectorConfig,
    pub encoder: PillarEncoder,
    pub fusion: Box<dyn Fusion>,
    pub head: DetectionHead,
    anchors: Vec<Box3>,
}

impl CollaborativeDetector {
    /// Registers the detector parameters in `store`, seeded by `seed`.
    pub fn new(config: DetectorConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = PillarEncoder::new(
            store,
            config.pillar_channels,
            config.channels,
            config.max_points_per_pillar,
            &mut rng,
        )?;
        let fusion = Box::new(ReduceMixFusion::new(store, config.fusion, config.channels, &mut rng)?);
        let head = DetectionHead::new(store, config.channels, config.anchors.per_cell(), &mut rng)?;
        let anchors = generate_anchors(&config.grid, &config.anchors);
        Ok(CollaborativeDetector {
            config,
            encoder,
            fusion,
            head,
            anchors,
        })
    }

    pub fn grid(&self) -> &GridConfig {
        &self.config.grid
    }

    pub fn anchors(&self) -> &[Box3] {
        &self.anchors
    }

    /// Encodes each ego-frame cloud with the shared encoder weights.
    pub fn encode_agents(&self, g: &mut Graph, store: &ParamStore, clouds: &[PointCloud]) -> Result<Vec<Var>> {
        clouds
            .iter()
            .map(|c| self.encoder.forward(g, store, c, &self.config.grid))
            .collect()
    }

    pub fn fuse_and_predict(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<HeadVars> {
        let fused = self.fusion.fuse(g, store, features)?;
        self.head.forward(g, store, fused)
    }

    pub fn extract_features(&self, store: &ParamStore, cloud: &PointCloud) -> Result<BevFeatureMap> {
        let mut g = Graph::new();
        let f = self.encoder.forward(&mut g, store, cloud, &self.config.grid)?;
        Ok(BevFeatureMap {
            data: g.value(f).clone(),
            grid: self.config.grid,
        })
    }

    pub fn fuse(&self, store: &ParamStore, features: &[BevFeatureMap]) -> Result<BevFeatureMap> {
        let mut g = Graph::new();
        let vars: Vec<Var> = features.iter().map(|f| g.input(f.data.clone())).collect();
        let fused = self.fusion.fuse(&mut g, store, &vars)?;
        Ok(BevFeatureMap {
            data: g.value(fused).clone(),
            grid: self.config.grid,
        })
    }

    pub fn predict(&self, store: &ParamStore, fused: &BevFeatureMap) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let x = g.input(fused.data.clone());
        let vars = self.head.forward(&mut g, store, x)?;
        Ok(HeadOutput::from_graph(&g, vars))
    }

    /// Full frozen inference on one sample.
    pub fn infer_head(&self, store: &ParamStore, sample: &CollaborativeSample) -> Result<HeadOutput> {
        let clouds = sample.clouds_in_ego()?;
        let mut g = Graph::new();
        let feats = self.encode_agents(&mut g, store, &clouds)?;
        let vars = self.fuse_and_predict(&mut g, store, &feats)?;
        Ok(HeadOutput::from_graph(&g, vars))
    }

    pub fn detect(&self, store: &ParamStore, sample: &CollaborativeSample) -> Result<BoxSet> {
        let out = self.infer_head(store, sample)?;
        decode_boxes(&out, &self.anchors, &self.config.decode)
    }

    pub fn detect_with(&self, store: &ParamStore, sample: &CollaborativeSample, decode: &DecodeConfig) -> Result<BoxSet> {
        let out = self.infer_head(store, sample)?;
        decode_boxes(&out, &self.anchors, decode)
    }
}
