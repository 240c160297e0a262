//! Collaborative frames: the per-agent sweeps of one time step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_to_ego, transform_boxes, BoxSet, PointCloud, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Vehicle,
    Infrastructure,
}

impl AgentType {
    pub const COUNT: usize = 2;

    /// Class index used by the inter-agent discriminator.
    pub fn index(self) -> usize {
        match self {
            AgentType::Vehicle => 0,
            AgentType::Infrastructure => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Label fed to the sim/real discriminator: source 0, target 1.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrame {
    /// Returns in the agent's own sensor frame.
    pub cloud: PointCloud,
    /// Sensor-to-world transform.
    pub pose: Pose,
    pub agent_type: AgentType,
    pub is_ego: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollaborativeSample {
    pub agents: Vec<AgentFrame>,
    /// World-frame boxes. `None` for unlabeled frames.
    pub annotations: Option<BoxSet>,
    pub domain: Domain,
}

impl CollaborativeSample {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Invariant("sample has no agents".into()));
        }
        let egos = self.agents.iter().filter(|a| a.is_ego).count();
        if egos != 1 {
            return Err(Error::Invariant(format!(
                "sample must have exactly one ego agent, found {egos}"
            )));
        }
        for a in &self.agents {
            a.pose.validate()?;
            a.cloud.validate()?;
        }
        if let Some(boxes) = &self.annotations {
            for b in boxes {
                b.validate()?;
            }
        }
        Ok(())
    }

    pub fn ego_index(&self) -> usize {
        self.agents.iter().position(|a| a.is_ego).unwrap_or(0)
    }

    pub fn ego(&self) -> &AgentFrame {
        &self.agents[self.ego_index()]
    }

    /// Every agent's cloud expressed in the ego frame, in agent order.
    pub fn clouds_in_ego(&self) -> Result<Vec<PointCloud>> {
        let ego_pose = self.ego().pose;
        self.agents
            .iter()
            .map(|a| project_to_ego(&a.cloud, &a.pose, &ego_pose))
            .collect()
    }

    /// Annotations in the ego frame, if present.
    pub fn annotations_in_ego(&self) -> Result<Option<BoxSet>> {
        match &self.annotations {
            None => Ok(None),
            Some(b) => Ok(Some(transform_boxes(b, &Pose::identity(), &self.ego().pose)?)),
        }
    }

    /// Drops the labels, as seen by every unsupervised training path.
    pub fn without_labels(mut self) -> Self {
        self.annotations = None;
        self
    }
}
