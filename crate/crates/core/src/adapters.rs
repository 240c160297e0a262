//! Decoupled domain adapters.
//!
//! The location-aware sim/real adapter (LSA) re-weights the ego feature map with a
//! learned spatial selection map, pools it and asks a discriminator which domain
//! it came from. The confidence-aware inter-agent adapter (CIA) asks a per-cell
//! discriminator which agent type produced each target-domain feature map,
//! weighting cells by the agents' shared detection confidence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::network::ConvParams;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::sample::{AgentType, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsaConfig {
    pub enabled: bool,
    /// Learn the spatial selection map; when off the map stays all ones.
    pub use_lfs: bool,
    /// Use a full `[C + 2, H, W]` selection map instead of a spatial `[H, W]` one.
    pub per_channel_map: bool,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for LsaConfig {
    fn default() -> Self {
        LsaConfig {
            enabled: true,
            use_lfs: true,
            per_channel_map: false,
            hidden: 64,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CiaConfig {
    pub enabled: bool,
    /// Weight cells by the joint confidence map; when off every cell has weight one.
    pub use_conf: bool,
    pub hidden: usize,
}

impl Default for CiaConfig {
    fn default() -> Self {
        CiaConfig {
            enabled: true,
            use_conf: true,
            hidden: 64,
        }
    }
}

/// Learnable selection map applied by element-wise multiplication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSelectionMap {
    pub id: ParamId,
}

impl FeatureSelectionMap {
    /// Registers an all-ones map of `shape` (`[H, W]` or `[C, H, W]`).
    pub fn new(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<Self> {
        if shape.len() != 2 && shape.len() != 3 {
            return Err(Error::Shape(format!("selection map must be 2D or 3D, got {shape:?}")));
        }
        Ok(FeatureSelectionMap {
            id: store.add(name, Tensor::full(shape, 1.0))?,
        })
    }
}

/// `f[c, u, v] * m[u, v]` (or `f * m` for a per-channel map).
pub fn lsa_select(g: &mut Graph, features: Var, map: Var) -> Result<Var> {
    if g.shape(map).len() == 3 {
        g.mul(features, map)
    } else {
        g.mul_spatial(features, map)
    }
}

/// Global average pooling `[C, H, W] -> [C]`.
pub fn lsa_pool(g: &mut Graph, weighted: Var) -> Result<Var> {
    g.mean_spatial(weighted)
}

/// Fully connected domain classifier on the pooled ego feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRealDiscriminator {
    layers: Vec<(ParamId, ParamId)>,
    input: usize,
    dropout: f64,
}

impl SimRealDiscriminator {
    /// Registers the layers under `prefix` (e.g. `adapters.lsa.disc`).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let dims = [input, hidden, hidden, 1];
        let mut layers = Vec::new();
        for (i, win) in dims.windows(2).enumerate() {
            let w = store.add_he(&format!("{prefix}.fc{i}.weight"), &[win[1], win[0]], win[0], rng)?;
            let b = store.add(&format!("{prefix}.fc{i}.bias"), Tensor::zeros(&[win[1]]))?;
            layers.push((w, b));
        }
        Ok(SimRealDiscriminator { layers, input, dropout })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    /// Logit for one pooled feature `[C + 2]`. Dropout is active only when `rng` is given.
    pub fn forward<R: Rng>(&self, g: &mut Graph, store: &ParamStore, pooled: Var, mut rng: Option<&mut R>) -> Result<Var> {
        if g.shape(pooled) != [self.input] {
            return Err(Error::Shape(format!(
                "discriminator expects [{}], got {:?}",
                self.input,
                g.shape(pooled)
            )));
        }
        let mut x = g.reshape(pooled, &[1, self.input])?;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            x = g.linear(x, wv, bv)?;
            if i < last {
                x = g.relu(x);
                if let Some(r) = rng.as_deref_mut() {
                    if self.dropout > 0.0 {
                        let keep = 1.0 - self.dropout;
                        let n = g.value(x).len();
                        let mask = (0..n)
                            .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        x = g.mul_const(x, mask)?;
                    }
                }
            }
        }
        g.reshape(x, &[1])
    }
}

/// Per-cell agent-type classifier built from 1x1 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct InterAgentDiscriminator {
    layers: Vec<ConvParams>,
}

impl InterAgentDiscriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let dims = [input, hidden, hidden, AgentType::COUNT];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvParams::new(store, &format!("adapters.cia.disc.conv{i}"), w[0], w[1], 1, rng))
            .collect::<Result<_>>()?;
        Ok(InterAgentDiscriminator { layers })
    }

    /// `[C + 2, H, W] -> [2, H, W]` logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut x = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(g, store, x, 1, 0)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// A discriminator loss and the logit it was computed from.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    pub loss: Var,
    pub logit: Var,
}

/// One ego feature (positional channels included) with its domain.
#[derive(Debug, Clone, Copy)]
pub struct LsaInput {
    pub features: Var,
    pub domain: Domain,
}

/// Both adapters and their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainAdapters {
    pub lsa: LsaConfig,
    pub cia: CiaConfig,
    pub selection: FeatureSelectionMap,
    pub sim_disc: SimRealDiscriminator,
    pub agent_disc: InterAgentDiscriminator,
}

impl DomainAdapters {
    /// Registers adapter parameters for `[channels, h, w]` encoded feature maps.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        lsa: LsaConfig,
        cia: CiaConfig,
        channels: usize,
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape: Vec<usize> = if lsa.per_channel_map { vec![channels, h, w] } else { vec![h, w] };
        let selection = FeatureSelectionMap::new(store, "adapters.lsa.select", &shape)?;
        let sim_disc = SimRealDiscriminator::new(store, "adapters.lsa.disc", channels, lsa.hidden, lsa.dropout, rng)?;
        let agent_disc = InterAgentDiscriminator::new(store, channels, cia.hidden, rng)?;
        Ok(DomainAdapters {
            lsa,
            cia,
            selection,
            sim_disc,
            agent_disc,
        })
    }

    /// Pooled global feature of one ego map, after reversal by `gamma` and selection.
    pub fn lsa_global(&self, g: &mut Graph, store: &ParamStore, features: Var, gamma: f64) -> Result<Var> {
        let x = g.grl(features, gamma);
        let x = if self.lsa.use_lfs {
            let m = g.param(store, self.selection.id);
            lsa_select(g, x, m)?
        } else {
            x
        };
        lsa_pool(g, x)
    }

    /// BCE of one sample's domain prediction, with the logit.
    pub fn lsa_sample<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: LsaInput,
        gamma: f64,
        rng: Option<&mut R>,
    ) -> Result<DiscOutput> {
        let s = self.lsa_global(g, store, input.features, gamma)?;
        let logit = self.sim_disc.forward(g, store, s, rng)?;
        let loss = g.bce_with_logits(logit, &[input.domain.label()])?;
        Ok(DiscOutput { loss, logit })
    }

    /// Mean domain BCE over a batch of ego features.
    pub fn lsa_loss<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[LsaInput],
        gamma: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Invariant("sim/real loss needs a non-empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for input in batch {
            let l = self.lsa_sample(g, store, *input, gamma, rng.as_deref_mut())?.loss;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(g.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
    }

    /// Confidence-weighted agent-type cross-entropy of one target sample, summed over
    /// agents and cells and divided by the number of agents.
    pub fn cia_sample_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        agents: &[(Var, AgentType)],
        conf: &Tensor,
        gamma: f64,
    ) -> Result<Var> {
        Ok(self.cia_sample(g, store, agents, conf, gamma)?.0)
    }

    /// [`Self::cia_sample_loss`] plus each agent's `[2, H, W]` logits.
    pub fn cia_sample(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        agents: &[(Var, AgentType)],
        conf: &Tensor,
        gamma: f64,
    ) -> Result<(Var, Vec<Var>)> {
        if agents.is_empty() {
            return Err(Error::Invariant("inter-agent loss needs at least one agent".into()));
        }
        let weights: Vec<f64> = if self.cia.use_conf {
            conf.data().to_vec()
        } else {
            vec![1.0; conf.len()]
        };
        let mut total: Option<Var> = None;
        let mut all_logits = Vec::with_capacity(agents.len());
        for &(f, kind) in agents {
            let x = g.grl(f, gamma);
            let logits = self.agent_disc.forward(g, store, x)?;
            let l = g.weighted_cell_ce(logits, kind.index(), &weights)?;
            all_logits.push(logits);
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok((g.scale(total.expect("non-empty"), 1.0 / agents.len() as f64), all_logits))
    }

    /// Mean over target samples of [`Self::cia_sample_loss`].
    pub fn cia_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        samples: &[(Vec<(Var, AgentType)>, Tensor)],
        gamma: f64,
    ) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Invariant("inter-agent loss needs a non-empty target batch".into()));
        }
        let mut total: Option<Var> = None;
        for (agents, conf) in samples {
            let l = self.cia_sample_loss(g, store, agents, conf, gamma)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(g.scale(total.expect("non-empty"), 1.0 / samples.len() as f64))
    }
}

/// Element-wise minimum of per-agent confidence maps.
pub fn cia_confidence_min(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Invariant("confidence minimum needs at least one map".into()))?;
    let mut out = first.clone();
    for m in &maps[1..] {
        if m.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "confidence maps differ: {:?} vs {:?}",
                m.shape(),
                out.shape()
            )));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.min(v);
        }
    }
    Ok(out)
}
