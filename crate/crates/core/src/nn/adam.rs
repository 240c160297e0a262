use serde::{Deserialize, Serialize};

use super::params::{quantize_f32, Grads, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with per-tensor step counters, so parameters introduced late
/// (e.g. adapters added after pretraining) get their own bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<Option<MomentState>>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Adam {
            config,
            states: vec![None; n_params],
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&MomentState> {
        self.states.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn states(&self) -> impl Iterator<Item = (ParamId, &MomentState)> {
        self.states
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i), s)))
    }

    pub fn set_state(&mut self, id: ParamId, state: MomentState) {
        if self.states.len() <= id.0 {
            self.states.resize(id.0 + 1, None);
        }
        self.states[id.0] = Some(state);
    }

    /// Applies one update with learning rate `lr`. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let st = self.states[id.0].get_or_insert_with(|| MomentState {
                step: 0,
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            st.step += 1;
            let bc1 = 1.0 - beta1.powi(st.step as i32);
            let bc2 = 1.0 - beta2.powi(st.step as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
            quantize_f32(p);
        }
    }
}
