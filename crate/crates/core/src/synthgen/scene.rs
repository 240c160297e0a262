use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::evaluation::bev_intersection_area;
use crate::geometry::{Box3, BoxSet, Pose};
use crate::rng::stream;
use crate::sample::AgentType;

const MAX_ATTEMPTS_PER_CAR: usize = 200;

/// Extra spacing between neighbouring cars.
const CAR_GAP: f64 = 0.5;

/// Minimum planar clearance kept between a car footprint and any sensor.
const SENSOR_CLEARANCE: f64 = 1.5;

/// One concrete scene request.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Half-widths of the drivable area around the world origin.
    pub road_half_extent: [f64; 2],
    pub n_cars: usize,
    pub car_size_mean: [f64; 3],
    pub car_size_std: [f64; 3],
    /// Sensor poses; the first entry is the ego.
    pub agents: Vec<(AgentType, Pose)>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.road_half_extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config("road extent must be positive".into()));
        }
        if self.car_size_mean.iter().any(|&s| !(s > 0.0)) || self.car_size_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("car size mean must be positive and std non-negative".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("a scene needs an ego agent".into()));
        }
        Ok(())
    }
}

/// Places `n_cars` non-overlapping cars on the ground inside the road area.
/// Returns world-frame boxes and the agent poses of the spec.
pub fn sample_scene(spec: &SceneSpec) -> Result<(BoxSet, Vec<(AgentType, Pose)>)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[0x5ce7e]);
    let size_dists: Vec<Normal<f64>> = (0..3)
        .map(|k| Normal::new(spec.car_size_mean[k], spec.car_size_std[k]).expect("finite std"))
        .collect();
    let mut boxes: BoxSet = Vec::with_capacity(spec.n_cars);
    for car in 0..spec.n_cars {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS_PER_CAR {
            let size: [f64; 3] = std::array::from_fn(|k| {
                size_dists[k]
                    .sample(&mut rng)
                    .clamp(0.6 * spec.car_size_mean[k], 1.4 * spec.car_size_mean[k])
            });
            let yaw = rng.random_range(-PI..PI);
            let reach = size[0].hypot(size[1]) / 2.0;
            let [ex, ey] = spec.road_half_extent;
            if reach >= ex || reach >= ey {
                return Err(Error::Generation(format!(
                    "car of size {size:?} does not fit inside the road extent"
                )));
            }
            let x = rng.random_range(-(ex - reach)..(ex - reach));
            let y = rng.random_range(-(ey - reach)..(ey - reach));
            let candidate = Box3::new([x, y, size[2] / 2.0], size, yaw);
            let padded = Box3::new(
                candidate.center,
                [size[0] + CAR_GAP, size[1] + CAR_GAP, size[2]],
                yaw,
            );
            let clear_of_sensors = spec.agents.iter().all(|(_, p)| {
                let t = p.translation();
                (t[0] - x).hypot(t[1] - y) > reach + SENSOR_CLEARANCE
            });
            if !clear_of_sensors {
                continue;
            }
            let overlaps = boxes.iter().any(|b| {
                let r = b.size[0].hypot(b.size[1]) / 2.0;
                (b.center[0] - x).hypot(b.center[1] - y) < r + reach + CAR_GAP && bev_intersection_area(b, &padded) > 0.0
            });
            if !overlaps {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place car {} of {} without overlap after {MAX_ATTEMPTS_PER_CAR} attempts",
                car + 1,
                spec.n_cars
            )));
        }
    }
    Ok((boxes, spec.agents.clone()))
}
