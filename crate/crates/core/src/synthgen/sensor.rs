use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityModel {
    /// The surface reflectance, independent of geometry.
    Constant,
    /// Reflectance scaled by the cosine of the incidence angle.
    Lambertian,
}

/// A spinning or solid-state LiDAR with evenly spaced beams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub beams: usize,
    /// Horizontal field of view in degrees, centred on the sensor heading.
    pub horizontal_fov: f64,
    /// Lowest and highest beam elevation in degrees, relative to the sensor.
    pub vertical_fov: [f64; 2],
    /// Horizontal angular step between firings in degrees.
    pub azimuth_resolution: f64,
    pub max_range: f64,
    pub mount_height: f64,
    /// Downward tilt is negative, in radians.
    pub pitch: f64,
    pub range_noise_sigma: f64,
    pub dropout_prob: f64,
    pub intensity_model: IntensityModel,
}

impl SensorModel {
    pub fn vehicle() -> Self {
        SensorModel {
            beams: 40,
            horizontal_fov: 360.0,
            vertical_fov: [-16.0, 7.0],
            azimuth_resolution: 0.2,
            max_range: 200.0,
            mount_height: 1.8,
            pitch: 0.0,
            range_noise_sigma: 0.0,
            dropout_prob: 0.0,
            intensity_model: IntensityModel::Constant,
        }
    }

    pub fn infrastructure() -> Self {
        SensorModel {
            beams: 300,
            horizontal_fov: 100.0,
            vertical_fov: [-12.5, 12.5],
            azimuth_resolution: 0.2,
            max_range: 280.0,
            mount_height: 6.0,
            pitch: -15f64.to_radians(),
            range_noise_sigma: 0.0,
            dropout_prob: 0.0,
            intensity_model: IntensityModel::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beams >= 1
            && self.horizontal_fov > 0.0
            && self.horizontal_fov <= 360.0
            && self.vertical_fov[0] <= self.vertical_fov[1]
            && self.vertical_fov.iter().all(|v| v.abs() <= 90.0)
            && self.azimuth_resolution > 0.0
            && self.max_range > 0.0
            && self.mount_height.is_finite()
            && self.pitch.is_finite()
            && self.range_noise_sigma >= 0.0
            && (0.0..1.0).contains(&self.dropout_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sensor model: {self:?}")))
        }
    }

    /// Beam elevations in radians, lowest first.
    pub fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov;
        if self.beams == 1 {
            return vec![(0.5 * (lo + hi)).to_radians()];
        }
        let step = (hi - lo) / (self.beams - 1) as f64;
        (0..self.beams).map(|i| (lo + step * i as f64).to_radians()).collect()
    }

    /// Firing azimuths in radians relative to the heading, covering the field of view.
    pub fn azimuths(&self) -> Vec<f64> {
        let fov = self.horizontal_fov;
        let n = if fov >= 360.0 {
            (360.0 / self.azimuth_resolution).round().max(1.0) as usize
        } else {
            (fov / self.azimuth_resolution).floor() as usize + 1
        };
        let start = if fov >= 360.0 { -180.0 } else { -fov / 2.0 };
        (0..n)
            .map(|i| (start + self.azimuth_resolution * i as f64).min(fov / 2.0).to_radians())
            .collect()
    }

    /// Whether a sensor-frame direction with azimuth `az` (radians) lies inside the horizontal field of view.
    pub fn in_horizontal_fov(&self, az: f64) -> bool {
        self.horizontal_fov >= 360.0 || az.abs() <= (self.horizontal_fov / 2.0).to_radians() + 1e-12
    }
}
