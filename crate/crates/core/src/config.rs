//! The full experiment configuration tree.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapters::{CiaConfig, LsaConfig};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::grl::GrlConfig;
use crate::training::{NaiveDiscConfig, PseudoLabelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.3, 0.5, 0.7],
        }
    }
}

/// Dataset locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub grl: GrlConfig,
    pub lsa: LsaConfig,
    pub cia: CiaConfig,
    pub selftrain: PseudoLabelConfig,
    pub naive: NaiveDiscConfig,
    pub eval: EvalConfig,
    pub data: DataPaths,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train.validate()?;
        self.selftrain.validate()?;
        for d in [self.lsa.dropout, self.naive.dropout] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("dropout must lie in [0, 1), got {d}")));
            }
        }
        if self.lsa.hidden == 0 || self.cia.hidden == 0 || self.naive.hidden == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("eval.thresholds must be non-empty and lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Parses JSON, rejecting unknown keys, and validates the result.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `dotted.key=value` override; the value is parsed as JSON, falling back to a string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serialises");
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("config key {key:?} does not name a field")))?;
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.get_mut(*part).expect("checked");
        }
        let updated: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Short stable hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_vec(self).expect("config serialises");
        crate::rng::sha256_hex(&text)[..12].to_string()
    }
}
