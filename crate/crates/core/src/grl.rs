//! Gradient reversal: identity on the way forward, `gamma * grad` on the way back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// A strictly negative gradient multiplier.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GrlFactor(f64);

impl GrlFactor {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma.is_finite() && gamma < 0.0 {
            Ok(GrlFactor(gamma))
        } else {
            Err(Error::Config(format!("GRL factor must be finite and negative, got {gamma}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GrlFactor {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        GrlFactor::new(v)
    }
}

impl From<GrlFactor> for f64 {
    fn from(g: GrlFactor) -> f64 {
        g.0
    }
}

/// How the factor evolves over training progress `p` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    #[default]
    Constant,
    /// `gamma * (2 / (1 + exp(-10 p)) - 1)`, the classic warm-up ramp.
    Ramp,
}

impl GrlSchedule {
    /// Effective multiplier at `progress`; the ramp starts at zero.
    pub fn factor(self, gamma: GrlFactor, progress: f64) -> f64 {
        match self {
            GrlSchedule::Constant => gamma.get(),
            GrlSchedule::Ramp => {
                let p = progress.clamp(0.0, 1.0);
                gamma.get() * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrlConfig {
    pub lsa_gamma: GrlFactor,
    pub cia_gamma: GrlFactor,
    pub schedule: GrlSchedule,
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig {
            lsa_gamma: GrlFactor(-0.05),
            cia_gamma: GrlFactor(-0.1),
            schedule: GrlSchedule::Constant,
        }
    }
}

/// Inserts a reversal node after `x`.
pub fn grl_forward(g: &mut Graph, x: Var, gamma: GrlFactor) -> Var {
    g.grl(x, gamma.get())
}

/// The reversal applied to an upstream gradient.
pub fn grl_backward(upstream: &Tensor, gamma: GrlFactor) -> Tensor {
    let mut t = upstream.clone();
    t.scale(gamma.get());
    t
}
