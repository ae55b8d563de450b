use serde::{Deserialize, Serialize};

use super::flows::FlowSchedule;
use super::network::{RoadNetwork, LANES_PER_INTERSECTION};
use super::sim::{SimConfig, Simulation};
use crate::error::Result;

/// Everything needed to instantiate fresh environment episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub network: RoadNetwork,
    pub schedule: FlowSchedule,
    pub sim: SimConfig,
}

impl EnvSpec {
    pub fn make(&self, seed: u64) -> Result<Simulation> {
        Simulation::new(self.network.clone(), &self.schedule, self.sim.clone(), seed)
    }

    pub fn n_agents(&self) -> usize {
        self.network.num_intersections()
    }

    pub fn n_phases(&self) -> usize {
        self.network.max_phases()
    }

    pub fn obs_dim(&self) -> usize {
        3 * LANES_PER_INTERSECTION + self.n_phases()
    }

    pub fn steps(&self) -> usize {
        self.sim.steps_per_episode
    }
}
