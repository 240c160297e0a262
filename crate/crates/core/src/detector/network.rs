//! The three trainable stages: pillar encoder, fusion and detection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::GridConfig;
use super::pillar::{pillarize, POINT_FEATURES};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

/// A convolution's weight and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_he(&format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(ConvParams { weight, bias })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, stride, pad)
    }
}

/// Shared per-agent feature extractor: point MLP, per-pillar max, BEV scatter, conv stages.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarEncoder {
    pfn_weight: ParamId,
    pfn_bias: ParamId,
    stages: Vec<ConvParams>,
    pillar_channels: usize,
    max_points: usize,
}

impl PillarEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        pillar_channels: usize,
        channels: usize,
        max_points: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let pfn_weight = store.add_he(
            "encoder.pfn.weight",
            &[pillar_channels, POINT_FEATURES],
            POINT_FEATURES,
            rng,
        )?;
        let pfn_bias = store.add("encoder.pfn.bias", Tensor::zeros(&[pillar_channels]))?;
        let stages = vec![
            ConvParams::new(store, "encoder.stage0", pillar_channels, channels, 3, rng)?,
            ConvParams::new(store, "encoder.stage1", channels, channels, 3, rng)?,
            ConvParams::new(store, "encoder.stage2", channels, channels, 3, rng)?,
        ];
        Ok(PillarEncoder {
            pfn_weight,
            pfn_bias,
            stages,
            pillar_channels,
            max_points,
        })
    }

    /// Produces the `[C, H, W]` feature map of one ego-frame cloud.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, cloud: &PointCloud, grid: &GridConfig) -> Result<Var> {
        let pillars = pillarize(cloud, grid, self.max_points, 0);
        let (ph, pw) = (grid.pillar_h(), grid.pillar_w());
        let canvas = if pillars.is_empty() {
            g.input(Tensor::zeros(&[self.pillar_channels, ph, pw]))
        } else {
            let n = pillars.num_points();
            let x = g.input(Tensor::from_vec(&[n, POINT_FEATURES], pillars.features)?);
            let w = g.param(store, self.pfn_weight);
            let b = g.param(store, self.pfn_bias);
            let hdn = g.linear(x, w, b)?;
            let hdn = g.relu(hdn);
            let pooled = g.segment_max(hdn, &pillars.offsets)?;
            g.scatter(pooled, &pillars.cells, ph, pw)?
        };
        let mut x = canvas;
        for (i, stage) in self.stages.iter().enumerate() {
            let stride = if i == 0 { grid.stride } else { 1 };
            x = stage.apply(g, store, x, stride, 1)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Element-wise maximum across agents, then a learned 1x1 mix.
    Max,
    /// Element-wise mean across agents, then a learned 1x1 mix.
    Mean,
}

/// Intermediate fusion of per-agent feature maps into one ego map.
pub trait Fusion: std::fmt::Debug + Send + Sync {
    fn fuse(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<Var>;
}

/// Agent-order-invariant reduction followed by a pointwise mixing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceMixFusion {
    kind: FusionKind,
    mix: ConvParams,
}

impl ReduceMixFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, kind: FusionKind, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(ReduceMixFusion {
            kind,
            mix: ConvParams::new(store, "fusion.mix", channels, channels, 1, rng)?,
        })
    }
}

impl Fusion for ReduceMixFusion {
    fn fuse(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<Var> {
        if features.is_empty() {
            return Err(Error::Shape("fusion needs at least one agent".into()));
        }
        let reduced = match (self.kind, features.len()) {
            (_, 1) => features[0],
            (FusionKind::Max, _) => g.max_n(features)?,
            (FusionKind::Mean, n) => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    if g.shape(f) != g.shape(acc) {
                        return Err(Error::Shape("fusion inputs differ in shape".into()));
                    }
                    acc = g.add(acc, f)?;
                }
                g.scale(acc, 1.0 / n as f64)
            }
        };
        let mixed = self.mix.apply(g, store, reduced, 1, 0)?;
        Ok(g.relu(mixed))
    }
}

/// Raw head outputs of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadVars {
    /// `[A, H, W]` classification logits.
    pub cls: Var,
    /// `[7A, H, W]` box residuals.
    pub reg: Var,
}

/// 3x3 conv trunk followed by 1x1 classification and regression branches.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    trunk: ConvParams,
    cls: ConvParams,
    reg: ConvParams,
}

/// Logit bias giving every anchor a 1% prior foreground probability.
pub const CLS_PRIOR_BIAS: f64 = -4.59511985013459;

impl DetectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, anchors_per_cell: usize, rng: &mut R) -> Result<Self> {
        let trunk = ConvParams::new(store, "head.trunk", channels, channels, 3, rng)?;
        let cls = ConvParams::new(store, "head.cls", channels, anchors_per_cell, 1, rng)?;
        let reg = ConvParams::new(store, "head.reg", channels, 7 * anchors_per_cell, 1, rng)?;
        for v in store.get_mut(cls.bias).data_mut() {
            *v = CLS_PRIOR_BIAS as f32 as f64;
        }
        // small regression weights keep early residuals near the anchors
        for v in store.get_mut(reg.weight).data_mut() {
            *v = (*v * 0.1) as f32 as f64;
        }
        Ok(DetectionHead { trunk, cls, reg })
    }

    pub fn cls_bias(&self) -> ParamId {
        self.cls.bias
    }

    pub fn reg_bias(&self) -> ParamId {
        self.reg.bias
    }

    pub fn trunk_bias(&self) -> ParamId {
        self.trunk.bias
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<HeadVars> {
        let t = self.trunk.apply(g, store, fused, 1, 1)?;
        let t = g.relu(t);
        let cls = self.cls.apply(g, store, t, 1, 0)?;
        let reg = self.reg.apply(g, store, t, 1, 0)?;
        Ok(HeadVars { cls, reg })
    }
}
