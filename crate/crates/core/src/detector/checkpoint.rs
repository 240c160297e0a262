//! Detector weights on disk: `params.bin` (f32 tensor file) and `arch.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{CollaborativeDetector, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::blob::{read_tensors, write_tensors, Precision};
use crate::nn::ParamStore;

pub const PARAMS_FILE: &str = "params.bin";
pub const ARCH_FILE: &str = "arch.json";

/// Architecture description stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub detector: DetectorConfig,
    /// Extra parameter groups present in `params.bin` (e.g. `"adapters"`).
    #[serde(default)]
    pub extras: serde_json::Value,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn save_params(dir: &Path, store: &ParamStore, arch: &Architecture) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tensors(&dir.join(PARAMS_FILE), &store.to_entries(), Precision::F32)?;
    write_json(&dir.join(ARCH_FILE), arch)
}

/// Rebuilds the detector described by `arch.json` and loads its weights.
/// Parameters of other groups in the file are ignored.
pub fn load_detector(dir: &Path) -> Result<(CollaborativeDetector, ParamStore, Architecture)> {
    let arch: Architecture = read_json(&dir.join(ARCH_FILE))?;
    let mut store = ParamStore::new();
    let det = CollaborativeDetector::new(arch.detector.clone(), &mut store, 0)?;
    let entries: Vec<_> = read_tensors(&dir.join(PARAMS_FILE))?
        .into_iter()
        .filter(|(n, _)| store.id(n).is_some())
        .collect();
    store.load_entries(&entries)?;
    Ok((det, store, arch))
}
