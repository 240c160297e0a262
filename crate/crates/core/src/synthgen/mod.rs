//! Deterministic two-domain multi-agent LiDAR scenes and their on-disk format.

mod dataset;
mod raycast;
mod scene;
mod sensor;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{generate_dataset, Dataset, FrameEntry, LabelBox, Manifest, MANIFEST_FILE};
pub use raycast::{raycast, raycast_returns, Environment, Return};
pub use scene::{sample_scene, SceneSpec};
pub use sensor::{IntensityModel, SensorModel};

use crate::error::{Error, Result};
use crate::geometry::{BoxSet, Pose};
use crate::rng::{derive_seed, stream};
use crate::sample::{AgentFrame, AgentType, CollaborativeSample, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    SyntheticSim,
    SyntheticReal,
}

impl ProfileName {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::SyntheticSim => "synthetic_sim",
            ProfileName::SyntheticReal => "synthetic_real",
        }
    }
}

impl std::str::FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic_sim" => Ok(ProfileName::SyntheticSim),
            "synthetic_real" => Ok(ProfileName::SyntheticReal),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected synthetic_sim or synthetic_real"
            ))),
        }
    }
}

/// How scenes of a profile are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneLayout {
    pub road_half_extent: [f64; 2],
    /// Inclusive range of cars per frame.
    pub cars: [usize; 2],
    pub car_size_mean: [f64; 3],
    pub car_size_std: [f64; 3],
    pub car_reflectance: [f64; 2],
    pub with_infrastructure: bool,
    /// Planar distance range of the infrastructure sensor from the ego.
    pub infrastructure_distance: [f64; 2],
    /// Maximum deviation of the infrastructure heading from the ego direction, degrees.
    pub infrastructure_heading_jitter: f64,
    /// Cars hit by fewer returns (over all agents) are left out of the labels.
    pub min_label_points: usize,
}

impl Default for SceneLayout {
    fn default() -> Self {
        SceneLayout {
            road_half_extent: [40.0, 40.0],
            cars: [10, 25],
            car_size_mean: [4.5, 1.9, 1.6],
            car_size_std: [0.3, 0.1, 0.1],
            car_reflectance: [0.3, 0.9],
            with_infrastructure: true,
            infrastructure_distance: [12.0, 30.0],
            infrastructure_heading_jitter: 15.0,
            min_label_points: 3,
        }
    }
}

/// Sensors and surface statistics of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainProfile {
    pub name: ProfileName,
    pub vehicle: SensorModel,
    pub infrastructure: SensorModel,
    pub clutter_density: f64,
    pub reflectance_offset: f64,
    pub scene: SceneLayout,
}

impl DomainProfile {
    /// Clean returns and one sensor design shared by every agent.
    pub fn synthetic_sim() -> Self {
        let vehicle = SensorModel::vehicle();
        let infrastructure = SensorModel {
            mount_height: SensorModel::infrastructure().mount_height,
            ..vehicle.clone()
        };
        DomainProfile {
            name: ProfileName::SyntheticSim,
            vehicle,
            infrastructure,
            clutter_density: 0.02,
            reflectance_offset: 0.0,
            scene: SceneLayout::default(),
        }
    }

    /// Noisy, partly dropped returns with incidence-dependent intensity, and a
    /// dense narrow-field pitched sensor on the infrastructure.
    pub fn synthetic_real() -> Self {
        let vehicle = SensorModel {
            range_noise_sigma: 0.05,
            dropout_prob: 0.2,
            intensity_model: IntensityModel::Lambertian,
            ..SensorModel::vehicle()
        };
        let infrastructure = SensorModel {
            range_noise_sigma: 0.02,
            dropout_prob: 0.05,
            intensity_model: IntensityModel::Lambertian,
            ..SensorModel::infrastructure()
        };
        DomainProfile {
            name: ProfileName::SyntheticReal,
            vehicle,
            infrastructure,
            clutter_density: 0.3,
            reflectance_offset: 0.2,
            scene: SceneLayout::default(),
        }
    }

    pub fn by_name(name: ProfileName) -> Self {
        match name {
            ProfileName::SyntheticSim => Self::synthetic_sim(),
            ProfileName::SyntheticReal => Self::synthetic_real(),
        }
    }

    pub fn sensor(&self, kind: AgentType) -> &SensorModel {
        match kind {
            AgentType::Vehicle => &self.vehicle,
            AgentType::Infrastructure => &self.infrastructure,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.infrastructure.validate()?;
        let s = &self.scene;
        let ok = self.clutter_density >= 0.0
            && self.clutter_density.is_finite()
            && self.reflectance_offset.is_finite()
            && s.cars[0] <= s.cars[1]
            && s.car_reflectance[0] <= s.car_reflectance[1]
            && s.car_reflectance[0] >= 0.0
            && s.car_reflectance[1] <= 1.0
            && s.infrastructure_distance[0] <= s.infrastructure_distance[1]
            && s.infrastructure_distance[0] >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid profile {}", self.name.as_str())));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::rng::sha256_hex(&serde_json::to_vec(self).expect("profile serialises"))
    }
}

/// A rendered frame: world-frame labels plus each agent's sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub sample: CollaborativeSample,
    /// Every placed car, including those filtered out of the labels.
    pub all_boxes: BoxSet,
    pub hits_per_box: Vec<usize>,
}

fn agent_layout(profile: &DomainProfile, seed: u64) -> Vec<(AgentType, Pose)> {
    let mut rng = stream(seed, &[0xa6e7]);
    let s = &profile.scene;
    let ego_yaw = rng.random_range(-PI..PI);
    let v = &profile.vehicle;
    let mut agents = vec![(
        AgentType::Vehicle,
        Pose::from_euler([0.0, 0.0, v.mount_height], 0.0, v.pitch, ego_yaw),
    )];
    if s.with_infrastructure {
        let i = &profile.infrastructure;
        let bearing = rng.random_range(-PI..PI);
        let [d0, d1] = s.infrastructure_distance;
        let dist = if d1 > d0 { rng.random_range(d0..d1) } else { d0 };
        let jitter = s.infrastructure_heading_jitter.to_radians();
        let heading = bearing + PI + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        let (sb, cb) = bearing.sin_cos();
        agents.push((
            AgentType::Infrastructure,
            Pose::from_euler([dist * cb, dist * sb, i.mount_height], 0.0, i.pitch, heading),
        ));
    }
    agents
}

/// Renders frame `index` of a dataset generated with `seed`.
pub fn render_frame(profile: &DomainProfile, seed: u64, index: u64) -> Result<RenderedFrame> {
    profile.validate()?;
    let frame_seed = derive_seed(seed, &[index]);
    let s = &profile.scene;
    let mut rng = stream(frame_seed, &[0xca75]);
    let n_cars = rng.random_range(s.cars[0]..=s.cars[1]);
    let spec = SceneSpec {
        road_half_extent: s.road_half_extent,
        n_cars,
        car_size_mean: s.car_size_mean,
        car_size_std: s.car_size_std,
        agents: agent_layout(profile, frame_seed),
        seed: frame_seed,
    };
    let (boxes, agents) = sample_scene(&spec)?;
    let [r0, r1] = s.car_reflectance;
    let env = Environment {
        road_half_extent: s.road_half_extent,
        clutter_density: profile.clutter_density,
        reflectance_offset: profile.reflectance_offset,
        car_reflectance: (0..boxes.len())
            .map(|_| if r1 > r0 { rng.random_range(r0..r1) } else { r0 })
            .collect(),
    };
    let mut hits = vec![0usize; boxes.len()];
    let mut frames = Vec::with_capacity(agents.len());
    for (j, (kind, pose)) in agents.iter().enumerate() {
        let returns = raycast_returns(&boxes, profile.sensor(*kind), pose, &env, derive_seed(frame_seed, &[0x5e, j as u64]));
        for r in &returns {
            if let Some(i) = r.source {
                hits[i] += 1;
            }
        }
        frames.push(AgentFrame {
            cloud: crate::geometry::PointCloud {
                points: returns.iter().map(|r| r.point).collect(),
            },
            pose: *pose,
            agent_type: *kind,
            is_ego: j == 0,
        });
    }
    let labels = boxes
        .iter()
        .zip(&hits)
        .filter(|(_, &h)| h >= s.min_label_points)
        .map(|(b, _)| *b)
        .collect();
    Ok(RenderedFrame {
        sample: CollaborativeSample {
            agents: frames,
            annotations: Some(labels),
            domain: match profile.name {
                ProfileName::SyntheticSim => Domain::Source,
                ProfileName::SyntheticReal => Domain::Target,
            },
        },
        all_boxes: boxes,
        hits_per_box: hits,
    })
}
