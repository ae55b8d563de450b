use alloc::collections::VecDeque;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comm::CommMode;
use crate::error::{Error, Result};
use crate::traffic::SimMetrics;

/// One complete episode as collected, including the noise needed to replay it.
///
/// Per-step arrays are row-major `[step][agent][...]`. Observation, noise,
/// gate and message arrays have `steps + 1` rows: the last row is the
/// bootstrap step after the final action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_phases: usize,
    pub message_len: usize,
    pub gate_dim: usize,
    pub steps: usize,
    pub comm_mode: CommMode,
    pub obs: Vec<f64>,
    pub actions: Vec<u32>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    pub message_noise: Vec<f64>,
    /// Logistic noise for learned gates, or the gate values themselves for fixed modes.
    pub gate_samples: Vec<f64>,
    /// Gates applied to outgoing messages.
    pub gates: Vec<f64>,
    /// Sampled (pre-gate) messages.
    pub messages: Vec<f64>,
    /// Q-values seen when acting.
    pub q_values: Vec<f64>,
    pub metrics: SimMetrics,
    pub start_offset: f64,
}

impl Episode {
    pub fn obs_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.obs_dim;
        &self.obs[t * w..(t + 1) * w]
    }

    pub fn agent_obs(&self, t: usize, i: usize) -> &[f64] {
        let base = (t * self.n_agents + i) * self.obs_dim;
        &self.obs[base..base + self.obs_dim]
    }

    /// Global state: concatenation of all observations.
    pub fn state_at(&self, t: usize) -> &[f64] {
        self.obs_at(t)
    }

    pub fn action(&self, t: usize, i: usize) -> usize {
        self.actions[t * self.n_agents + i] as usize
    }

    /// Action taken before step `t` (`None` at the first step).
    pub fn prev_action(&self, t: usize, i: usize) -> Option<usize> {
        (t > 0).then(|| self.action(t - 1, i))
    }

    pub fn message_noise_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.message_len;
        &self.message_noise[t * w..(t + 1) * w]
    }

    pub fn gate_samples_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.gate_dim;
        &self.gate_samples[t * w..(t + 1) * w]
    }

    pub fn gates_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.gate_dim;
        &self.gates[t * w..(t + 1) * w]
    }

    pub fn q_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.n_phases;
        &self.q_values[t * w..(t + 1) * w]
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// FIFO store of whole episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), episodes: VecDeque::new(), inserted: 0 }
    }

    /// Rebuilds a buffer from saved contents, oldest episode first.
    pub fn restore(capacity: usize, episodes: Vec<Episode>, inserted: u64) -> Result<Self> {
        let capacity = capacity.max(1);
        if episodes.len() > capacity || (episodes.len() as u64) > inserted {
            return Err(Error::InvalidArgument("replay contents exceed capacity or insert count".into()));
        }
        Ok(Self { capacity, episodes: episodes.into(), inserted })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Episodes inserted over the buffer's lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Appends an episode, evicting the oldest one at capacity.
    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() >= self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.inserted += 1;
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// `n` distinct indices drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<usize>> {
        if self.episodes.len() < n {
            return Err(Error::InsufficientBuffer { have: self.episodes.len(), need: n });
        }
        Ok(rand::seq::index::sample(rng, self.episodes.len(), n).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<&Episode>> {
        Ok(self.sample_indices(rng, n)?.into_iter().map(|i| &self.episodes[i]).collect())
    }
}
