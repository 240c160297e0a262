use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::sensor::{IntensityModel, SensorModel};
use crate::geometry::{Box3, PointCloud, Pose};
use crate::rng::stream;

/// Scene-wide surface properties shared by all sensors of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub road_half_extent: [f64; 2],
    /// Ground and noise returns per square metre of road.
    pub clutter_density: f64,
    /// Added to every intensity before clamping to `[0, 1]`.
    pub reflectance_offset: f64,
    /// Surface reflectance of each car, indexed like the scene boxes.
    pub car_reflectance: Vec<f64>,
}

impl Environment {
    pub fn clean(road_half_extent: [f64; 2]) -> Self {
        Environment {
            road_half_extent,
            clutter_density: 0.0,
            reflectance_offset: 0.0,
            car_reflectance: Vec::new(),
        }
    }
}

const DEFAULT_CAR_REFLECTANCE: f64 = 0.6;

/// One LiDAR return together with where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Return {
    /// Sensor-frame `(x, y, z, intensity)`.
    pub point: [f64; 4],
    /// Index of the car that produced it, `None` for ground clutter.
    pub source: Option<usize>,
    /// Noise-free range along the ray.
    pub true_range: f64,
}

/// Entry distance and local face axis of a ray hitting an oriented box from outside.
fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &Box3) -> Option<(f64, usize)> {
    let (s, c) = b.yaw.sin_cos();
    let rel = [origin[0] - b.center[0], origin[1] - b.center[1], origin[2] - b.center[2]];
    let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for k in 0..3 {
        let half = b.size[k] / 2.0;
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[k]) / d[k];
        let t2 = (half - o[k]) / d[k];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            axis = k;
        }
        t_far = t_far.min(hi);
    }
    if t_near <= t_far && t_near > 0.0 {
        Some((t_near, axis))
    } else {
        None
    }
}

/// Absolute cosine between a world ray and the hit face normal.
fn incidence_cos(dir: [f64; 3], b: &Box3, axis: usize) -> f64 {
    let (s, c) = b.yaw.sin_cos();
    let n = match axis {
        0 => [c, s, 0.0],
        1 => [-s, c, 0.0],
        _ => [0.0, 0.0, 1.0],
    };
    (dir[0] * n[0] + dir[1] * n[1] + dir[2] * n[2]).abs()
}

fn nearest_hit(origin: [f64; 3], dir: [f64; 3], boxes: &[Box3], max_t: f64) -> Option<(f64, usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (i, b) in boxes.iter().enumerate() {
        if let Some((t, axis)) = ray_box(origin, dir, b) {
            if t <= max_t && best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, i, axis));
            }
        }
    }
    best
}

fn shade(model: IntensityModel, reflectance: f64, cos: f64, offset: f64) -> f64 {
    let raw = match model {
        IntensityModel::Constant => reflectance,
        IntensityModel::Lambertian => reflectance * cos,
    };
    (raw + offset).clamp(0.0, 1.0)
}

fn direction(az: f64, el: f64) -> [f64; 3] {
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Simulates one sweep of `sensor` mounted at `pose` over world-frame `boxes`.
pub fn raycast_returns(boxes: &[Box3], sensor: &SensorModel, pose: &Pose, env: &Environment, seed: u64) -> Vec<Return> {
    let mut noise_rng = stream(seed, &[1]);
    let mut clutter_rng = stream(seed, &[2]);
    let noise = (sensor.range_noise_sigma > 0.0).then(|| Normal::new(0.0, sensor.range_noise_sigma).expect("finite sigma"));
    let origin = pose.translation();
    let mut out = Vec::new();

    let mut emit = |rng: &mut rand_chacha::ChaCha8Rng, dir_s: [f64; 3], range: f64, intensity: f64, source: Option<usize>| {
        if sensor.dropout_prob > 0.0 && rng.random::<f64>() < sensor.dropout_prob {
            return;
        }
        let r = match &noise {
            Some(n) => range + n.sample(rng),
            None => range,
        };
        if !(r > 0.0 && r <= sensor.max_range) {
            return;
        }
        out.push(Return {
            point: [r * dir_s[0], r * dir_s[1], r * dir_s[2], intensity],
            source,
            true_range: range,
        });
    };

    let elevations = sensor.elevations();
    for az in sensor.azimuths() {
        for &el in &elevations {
            let dir_s = direction(az, el);
            let dir_w = pose.rotate_vector(dir_s);
            if let Some((t, i, axis)) = nearest_hit(origin, dir_w, boxes, sensor.max_range) {
                let refl = env.car_reflectance.get(i).copied().unwrap_or(DEFAULT_CAR_REFLECTANCE);
                let intensity = shade(
                    sensor.intensity_model,
                    refl,
                    incidence_cos(dir_w, &boxes[i], axis),
                    env.reflectance_offset,
                );
                emit(&mut noise_rng, dir_s, t, intensity, Some(i));
            }
        }
    }

    if env.clutter_density > 0.0 {
        let [ex, ey] = env.road_half_extent;
        let mean = env.clutter_density * 4.0 * ex * ey;
        let count = Poisson::new(mean).map(|p| p.sample(&mut clutter_rng) as usize).unwrap_or(0);
        let inv = pose.inverse().expect("valid pose");
        let [el_lo, el_hi] = sensor.vertical_fov;
        for _ in 0..count {
            let x = clutter_rng.random_range(-ex..ex);
            let y = clutter_rng.random_range(-ey..ey);
            let refl = clutter_rng.random_range(0.05..0.3);
            let p = inv.transform_point([x, y, 0.0]);
            let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if range <= 0.0 || range > sensor.max_range {
                continue;
            }
            let dir_s = [p[0] / range, p[1] / range, p[2] / range];
            let az = dir_s[1].atan2(dir_s[0]);
            let el = dir_s[2].asin().to_degrees();
            if !sensor.in_horizontal_fov(az) || el < el_lo || el > el_hi {
                continue;
            }
            let dir_w = pose.rotate_vector(dir_s);
            if nearest_hit(origin, dir_w, boxes, range).is_some() {
                continue;
            }
            let intensity = shade(sensor.intensity_model, refl, dir_w[2].abs(), env.reflectance_offset);
            emit(&mut noise_rng, dir_s, range, intensity, None);
        }
    }
    out
}

/// Sensor-frame point cloud of one sweep.
pub fn raycast(boxes: &[Box3], sensor: &SensorModel, pose: &Pose, env: &Environment, seed: u64) -> PointCloud {
    PointCloud {
        points: raycast_returns(boxes, sensor, pose, env, seed)
            .into_iter()
            .map(|r| r.point)
            .collect(),
    }
}
