//! Per-sample loss graphs and the joint gradient of one batch.

use rand_chacha::ChaCha8Rng;

use super::data::PreparedSample;
use super::model::Model;
use crate::adapters::{cia_confidence_min, LsaInput};
use crate::detector::{assign_targets, confidence_map, detection_loss, BevFeatureMap};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Grads, Graph, Tensor, Var};
use crate::sample::Domain;

/// Weights of the loss terms a sample contributes. `None` leaves the term out of the graph;
/// `Some(0.0)` builds it and scales it by zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleTerms {
    pub det: Option<f64>,
    pub lsa: Option<f64>,
    pub cia: Option<f64>,
    /// Weight of each agent's term in the naive sim/real baseline.
    pub naive: Option<f64>,
}

/// Effective reversal multipliers for this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reversal {
    pub lsa: f64,
    pub cia: f64,
}

/// Unweighted loss values and discriminator hits of one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleStats {
    pub det: Option<f64>,
    pub sim: Option<(f64, bool)>,
    /// Loss, correctly classified cells, total cells.
    pub agent: Option<(f64, usize, usize)>,
    pub naive: Vec<(f64, bool)>,
}

pub struct SampleGraph {
    pub graph: Graph,
    pub root: Option<Var>,
    pub stats: SampleStats,
    /// Joint confidence map used to weight the inter-agent loss.
    pub conf: Option<Tensor>,
}

/// Per-cell minimum over agents of the single-agent detection confidence.
/// Computed on plain values, so it carries no gradient.
pub fn joint_confidence(model: &Model, features: &[Tensor]) -> Result<Tensor> {
    let det = &model.detector;
    let maps = features
        .iter()
        .map(|f| {
            let fm = BevFeatureMap {
                data: f.clone(),
                grid: *det.grid(),
            };
            let fused = det.fuse(&model.store, std::slice::from_ref(&fm))?;
            Ok(confidence_map(&det.predict(&model.store, &fused)?))
        })
        .collect::<Result<Vec<_>>>()?;
    cia_confidence_min(&maps)
}

fn add_term(g: &mut Graph, root: &mut Option<Var>, term: Var, weight: f64) -> Result<()> {
    let t = g.scale(term, weight);
    *root = Some(match *root {
        None => t,
        Some(r) => g.add(r, t)?,
    });
    Ok(())
}

/// Builds the weighted loss graph of one sample.
pub fn sample_graph(
    model: &Model,
    sample: &PreparedSample,
    terms: SampleTerms,
    reversal: Reversal,
    conf_override: Option<&Tensor>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<SampleGraph> {
    let det = &model.detector;
    let store = &model.store;
    let mut g = Graph::new();
    let feats = det.encode_agents(&mut g, store, &sample.clouds)?;
    let mut root = None;
    let mut stats = SampleStats::default();
    let mut conf = None;

    if let Some(w) = terms.det {
        let boxes = sample.boxes()?;
        let head = det.fuse_and_predict(&mut g, store, &feats)?;
        let targets = assign_targets(
            det.anchors(),
            det.grid(),
            det.config.anchors.per_cell(),
            boxes,
            &det.config.matching,
        )?;
        let l = detection_loss(&mut g, head, &targets, &det.config.loss)?;
        stats.det = Some(g.value(l.total).item());
        add_term(&mut g, &mut root, l.total, w)?;
    }

    let needs_encoded = terms.lsa.is_some() || terms.cia.is_some() || terms.naive.is_some();
    let encoded: Vec<Var> = if needs_encoded {
        let pe = g.input(model.positional.clone());
        feats.iter().map(|&f| g.concat(f, pe)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    if let Some(w) = terms.lsa {
        let adapters = model
            .adapters
            .as_ref()
            .ok_or_else(|| Error::Invariant("sim/real term requested without adapters".into()))?;
        let out = adapters.lsa_sample(
            &mut g,
            store,
            LsaInput {
                features: encoded[0],
                domain: sample.domain,
            },
            reversal.lsa,
            dropout.as_deref_mut(),
        )?;
        let logit = g.value(out.logit).item();
        let correct = (sigmoid(logit) >= 0.5) == (sample.domain == Domain::Target);
        stats.sim = Some((g.value(out.loss).item(), correct));
        add_term(&mut g, &mut root, out.loss, w)?;
    }

    if let Some(w) = terms.cia {
        let adapters = model
            .adapters
            .as_ref()
            .ok_or_else(|| Error::Invariant("inter-agent term requested without adapters".into()))?;
        let m = match conf_override {
            Some(c) => c.clone(),
            None => {
                let values: Vec<Tensor> = feats.iter().map(|&f| g.value(f).clone()).collect();
                joint_confidence(model, &values)?
            }
        };
        let agents: Vec<_> = encoded.iter().copied().zip(sample.agent_types.iter().copied()).collect();
        let (loss, logits) = adapters.cia_sample(&mut g, store, &agents, &m, reversal.cia)?;
        let mut correct = 0;
        let mut cells = 0;
        for (lv, kind) in logits.iter().zip(&sample.agent_types) {
            let t = g.value(*lv);
            let hw = t.len() / 2;
            for u in 0..hw {
                let pred = usize::from(t.data()[hw + u] > t.data()[u]);
                correct += usize::from(pred == kind.index());
            }
            cells += hw;
        }
        stats.agent = Some((g.value(loss).item(), correct, cells));
        conf = Some(m);
        add_term(&mut g, &mut root, loss, w)?;
    }

    if let Some(w) = terms.naive {
        let disc = model
            .naive
            .as_ref()
            .ok_or_else(|| Error::Invariant("naive discriminator term requested without one".into()))?;
        for &f in &encoded {
            let x = g.grl(f, reversal.lsa);
            let pooled = g.mean_spatial(x)?;
            let logit = disc.forward(&mut g, store, pooled, dropout.as_deref_mut())?;
            let loss = g.bce_with_logits(logit, &[sample.domain.label()])?;
            let correct = (sigmoid(g.value(logit).item()) >= 0.5) == (sample.domain == Domain::Target);
            stats.naive.push((g.value(loss).item(), correct));
            add_term(&mut g, &mut root, loss, w)?;
        }
    }

    Ok(SampleGraph {
        graph: g,
        root,
        stats,
        conf,
    })
}

/// Backpropagates one sample graph into `grads`.
pub fn accumulate(sg: &SampleGraph, grads: &mut Grads) -> Result<()> {
    if let Some(root) = sg.root {
        let gr = sg.graph.backward(root)?;
        gr.accumulate_params(&sg.graph, grads, 1.0);
    }
    Ok(())
}
