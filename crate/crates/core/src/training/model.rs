//! The trainable bundle (detector plus optional adapters) and its checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NaiveDiscConfig;
use super::data::tags;
use crate::adapters::{CiaConfig, DomainAdapters, LsaConfig, SimRealDiscriminator};
use crate::detector::checkpoint::{read_json, save_params, write_json, Architecture, PARAMS_FILE};
use crate::detector::{positional_encoding, CollaborativeDetector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::blob::{read_tensors, write_tensors, Precision};
use crate::nn::{Adam, AdamConfig, MomentState, ParamId, ParamStore, Tensor};
use crate::rng::stream;

pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Dusa,
    NaiveDiscriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterArch {
    pub kind: AdapterKind,
    pub lsa: LsaConfig,
    pub cia: CiaConfig,
    pub naive: NaiveDiscConfig,
}

/// Detector parameters plus whichever adapter heads are attached.
#[derive(Debug)]
pub struct Model {
    pub detector: CollaborativeDetector,
    pub adapters: Option<DomainAdapters>,
    pub naive: Option<SimRealDiscriminator>,
    pub adapter_arch: Option<AdapterArch>,
    pub store: ParamStore,
    /// `[2, H, W]` positional channels of the feature grid.
    pub positional: Tensor,
    detector_params: usize,
}

impl Model {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let detector = CollaborativeDetector::new(config, &mut store, seed)?;
        let positional = positional_encoding(detector.grid(), detector.config.positional);
        let detector_params = store.len();
        Ok(Model {
            detector,
            adapters: None,
            naive: None,
            adapter_arch: None,
            store,
            positional,
            detector_params,
        })
    }

    /// Channel count of feature maps with positional channels appended.
    pub fn encoded_channels(&self) -> usize {
        self.detector.config.channels + 2
    }

    pub fn is_detector_param(&self, id: ParamId) -> bool {
        id.0 < self.detector_params
    }

    /// Registers adapter parameters, initialised from `seed`. A model carries at most one adapter set.
    pub fn attach(&mut self, arch: AdapterArch, seed: u64) -> Result<()> {
        if let Some(existing) = &self.adapter_arch {
            if *existing == arch {
                return Ok(());
            }
            return Err(Error::Checkpoint(format!(
                "model already carries {:?} adapters with a different configuration",
                existing.kind
            )));
        }
        let mut rng = stream(seed, &[tags::INIT, 1]);
        let c = self.encoded_channels();
        let grid = *self.detector.grid();
        match arch.kind {
            AdapterKind::Dusa => {
                self.adapters = Some(DomainAdapters::new(
                    &mut self.store,
                    arch.lsa,
                    arch.cia,
                    c,
                    grid.feat_h(),
                    grid.feat_w(),
                    &mut rng,
                )?);
            }
            AdapterKind::NaiveDiscriminator => {
                self.naive = Some(SimRealDiscriminator::new(
                    &mut self.store,
                    "baseline.disc",
                    c,
                    arch.naive.hidden,
                    arch.naive.dropout,
                    &mut rng,
                )?);
            }
        }
        self.adapter_arch = Some(arch);
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            detector: self.detector.config.clone(),
            extras: match &self.adapter_arch {
                Some(a) => serde_json::json!({ "adapters": a }),
                None => serde_json::Value::Null,
            },
        }
    }

    fn from_architecture(arch: &Architecture) -> Result<Self> {
        let mut model = Model::new(arch.detector.clone(), 0)?;
        if let Some(a) = arch.extras.get("adapters") {
            let a: AdapterArch = serde_json::from_value(a.clone())
                .map_err(|e| Error::Checkpoint(format!("invalid adapter description: {e}")))?;
            model.attach(a, 0)?;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Pretrain,
    Dusa,
    NaiveDiscriminator,
    FrozenProbe,
    SelfTrain,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Dusa => "dusa",
            Stage::NaiveDiscriminator => "naive_discriminator",
            Stage::FrozenProbe => "frozen_probe",
            Stage::SelfTrain => "self_train",
        }
    }
}

/// Progress counters stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub epochs_completed: usize,
    pub global_step: u64,
    pub best_val: Option<f64>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
    /// Self-training round the checkpoint belongs to.
    pub round: Option<usize>,
    pub adam: AdamConfig,
    pub adam_steps: BTreeMap<String, u64>,
}

impl TrainState {
    pub fn new(stage: Stage, seed: u64, config_hash: String, adam: AdamConfig) -> Self {
        TrainState {
            stage,
            seed,
            config_hash,
            epochs_completed: 0,
            global_step: 0,
            best_val: None,
            bad_epochs: 0,
            stopped_early: false,
            round: None,
            adam,
            adam_steps: BTreeMap::new(),
        }
    }
}

/// Writes weights, architecture, optimiser moments and counters into `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, adam: &Adam, state: &TrainState) -> Result<()> {
    save_params(dir, &model.store, &model.architecture())?;
    let mut entries = Vec::new();
    let mut state = state.clone();
    state.adam_steps.clear();
    for (id, st) in adam.states() {
        let name = model.store.name(id);
        entries.push((format!("m/{name}"), st.m.clone()));
        entries.push((format!("v/{name}"), st.v.clone()));
        state.adam_steps.insert(name.to_string(), st.step);
    }
    write_tensors(&dir.join(OPTIMIZER_FILE), &entries, Precision::F64)?;
    write_json(&dir.join(STATE_FILE), &state)
}

/// Restores a model, its optimiser and counters. A weights-only directory yields fresh optimiser state.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Adam, TrainState)> {
    let arch: Architecture = read_json(&dir.join(crate::detector::checkpoint::ARCH_FILE))?;
    let mut model = Model::from_architecture(&arch)?;
    model.store.load_entries(&read_tensors(&dir.join(PARAMS_FILE))?)?;
    let state_path = dir.join(STATE_FILE);
    let state: TrainState = if state_path.exists() {
        read_json(&state_path)?
    } else {
        TrainState::new(Stage::Init, 0, String::new(), AdamConfig::default())
    };
    let mut adam = Adam::new(state.adam, model.store.len());
    let opt_path = dir.join(OPTIMIZER_FILE);
    if opt_path.exists() {
        let entries: BTreeMap<String, Tensor> = read_tensors(&opt_path)?.into_iter().collect();
        for (name, &step) in &state.adam_steps {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {name}")))?;
            let get = |k: String| {
                entries
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer file lacks {k}")))
            };
            let m = get(format!("m/{name}"))?;
            let v = get(format!("v/{name}"))?;
            if m.shape() != model.store.get(id).shape() || v.shape() != m.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments of {name} have the wrong shape")));
            }
            adam.set_state(id, MomentState { step, m, v });
        }
    }
    Ok((model, adam, state))
}
