#![allow(dead_code)]

use coopadapt_core::adapters::{CiaConfig, LsaConfig};
use coopadapt_core::config::ExperimentConfig;
use coopadapt_core::detector::{DetectorConfig, GridConfig};
use coopadapt_core::geometry::{Box3, PointCloud};
use coopadapt_core::nn::ParamId;
use coopadapt_core::sample::{AgentType, Domain};
use coopadapt_core::training::{AdapterArch, AdapterKind, Model, NaiveDiscConfig, PreparedSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8x8 pillars, 4x4 feature cells, two channels.
pub fn tiny_detector() -> DetectorConfig {
    let mut d = DetectorConfig::default();
    d.grid = GridConfig {
        x_range: [-3.2, 3.2],
        y_range: [-3.2, 3.2],
        z_range: [-3.0, 1.0],
        cell: 0.8,
        stride: 2,
    };
    d.channels = 2;
    d.pillar_channels = 2;
    d.max_points_per_pillar = 8;
    d.anchors.size = [2.0, 1.0, 1.5];
    d
}

pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.detector = tiny_detector();
    cfg.lsa.hidden = 3;
    cfg.cia.hidden = 3;
    cfg.naive.hidden = 3;
    cfg
}

pub fn arch(kind: AdapterKind, lsa: LsaConfig, cia: CiaConfig) -> AdapterArch {
    AdapterArch {
        kind,
        lsa,
        cia,
        naive: NaiveDiscConfig { hidden: 3, dropout: 0.5 },
    }
}

pub fn tiny_model(seed: u64) -> Model {
    let cfg = tiny_config();
    let mut m = Model::new(cfg.detector.clone(), seed).unwrap();
    m.attach(arch(AdapterKind::Dusa, cfg.lsa, cfg.cia), seed + 1).unwrap();
    m
}

/// A random two-agent frame inside the tiny grid with one box.
pub fn tiny_sample(seed: u64, domain: Domain) -> PreparedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = |n: usize| {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-3.1..3.1),
                        rng.random_range(-3.1..3.1),
                        rng.random_range(-2.5..0.5),
                        rng.random_range(0.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    };
    let clouds = vec![cloud(60), cloud(90)];
    let b = Box3::new(
        [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), -1.0],
        [2.0, 1.0, 1.5],
        rng.random_range(-1.5..1.5),
    );
    PreparedSample {
        clouds,
        agent_types: vec![AgentType::Vehicle, AgentType::Infrastructure],
        boxes: Some(vec![b]),
        domain,
    }
}

/// Every scalar parameter as `(id, flat index)`.
pub fn coordinates(model: &Model, filter: impl Fn(ParamId, &str) -> bool) -> Vec<(ParamId, usize)> {
    model
        .store
        .iter()
        .filter(|(id, name, _)| filter(*id, name))
        .flat_map(|(id, _, t)| (0..t.len()).map(move |k| (id, k)))
        .collect()
}

/// Central finite differences of `f` over the given coordinates.
pub fn finite_diff(model: &mut Model, coords: &[(ParamId, usize)], eps: f64, f: impl Fn(&Model) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&(id, k)| {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + eps;
            let up = f(model);
            model.store.get_mut(id).data_mut()[k] = orig - eps;
            let down = f(model);
            model.store.get_mut(id).data_mut()[k] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}
