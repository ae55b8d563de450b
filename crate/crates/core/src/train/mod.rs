//! Episode collection, replay, the joint TD + communication objective and the training loop.

mod buffer;
mod loss;
mod rollout;
mod trainer;
mod unroll;

#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{CommLossConfig, CommMode, GATE_TEMPERATURE};
use crate::diff::RmsPropConfig;

pub use buffer::{Episode, ReplayBuffer};
pub use loss::{build_loss, td_targets, LossBreakdown, LossNodes};
pub use rollout::{rollout_episode, RolloutOptions, StepObserver};
pub(crate) use rollout::rollout_observed;
pub use trainer::{TrainLogRecord, Trainer, TrainerProgress};
pub use unroll::{GateInput, StepInputs, StepOutput, Topology, Unroller};

/// When a recipient's Q-network sees a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageTiming {
    /// Messages sent at `t` are consumed at `t + 1`.
    Delayed,
    /// Messages sent at `t` are consumed at `t`.
    SameStep,
}

impl MessageTiming {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "delayed" => Ok(Self::Delayed),
            "same-step" | "samestep" => Ok(Self::SameStep),
            _ => Err(crate::Error::InvalidArgument(alloc::format!("unknown message timing {s:?}"))),
        }
    }
}

/// Linear exploration schedule over environment steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.05, anneal_steps: 50_000 }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * (step as f64 / self.anneal_steps as f64)
    }
}

pub fn epsilon(step: u64, schedule: &EpsilonSchedule) -> f64 {
    schedule.at(step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_episodes: u64,
    pub gamma: f64,
    pub epsilon: EpsilonSchedule,
    pub batch_episodes: usize,
    pub buffer_capacity: usize,
    /// Target refresh period in episodes.
    pub target_update_episodes: u64,
    pub parallel_envs: usize,
    pub comm: CommLossConfig,
    pub gate_temperature: f64,
    /// Gates used while training; `learned` is the full method.
    pub comm_mode: CommMode,
    pub message_timing: MessageTiming,
    /// Draw new message and gate noise when replaying instead of the stored samples.
    pub fresh_noise: bool,
    pub double_q: bool,
    /// Multiplies rewards before they enter the TD target.
    pub reward_scale: f64,
    pub optimizer: RmsPropConfig,
    /// Episodes per differentiation tape; bounds memory on large grids.
    pub episodes_per_tape: usize,
    /// Greedy evaluation period in episodes (0 disables).
    pub eval_every: u64,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_episodes: 2000,
            gamma: 0.99,
            epsilon: EpsilonSchedule::default(),
            batch_episodes: 32,
            buffer_capacity: 5000,
            target_update_episodes: 200,
            parallel_envs: 2,
            comm: CommLossConfig::default(),
            gate_temperature: GATE_TEMPERATURE,
            comm_mode: CommMode::Learned,
            message_timing: MessageTiming::Delayed,
            fresh_noise: false,
            double_q: false,
            reward_scale: 1.0,
            optimizer: RmsPropConfig::default(),
            episodes_per_tape: 4,
            eval_every: 200,
            eval_episodes: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::InvalidArgument(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.batch_episodes == 0 || self.buffer_capacity < self.batch_episodes {
            return bad("buffer capacity must hold at least one batch");
        }
        if self.parallel_envs == 0 || self.episodes_per_tape == 0 {
            return bad("parallel_envs and episodes_per_tape must be positive");
        }
        if !(self.gate_temperature > 0.0) {
            return bad("gate temperature must be positive");
        }
        self.comm_mode.validated()?;
        Ok(())
    }
}

/// Independent random stream for `(master seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id of environment `env` during collection round `round`.
pub fn env_stream(env: usize, round: u64) -> u64 {
    (round << 16) | (env as u64 & 0xffff) | (1 << 63)
}
