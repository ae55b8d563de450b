use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParameterSet, RmsProp, Tape};
use crate::error::Result;
use crate::eval::{evaluate, EvalMetrics};
use crate::nets::{ArchConfig, Networks};
use crate::traffic::EnvSpec;

use super::buffer::{Episode, ReplayBuffer};
use super::loss::{build_loss, LossBreakdown};
use super::rollout::{rollout_episode, RolloutOptions};
use super::unroll::Topology;
use super::{env_stream, stream_rng, TrainConfig};

const INIT_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const EVAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// One line of the training log, emitted after every collection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub episode: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub epsilon: f64,
    /// Mean undiscounted return of the episodes collected this round.
    pub train_return: f64,
    pub loss: Option<LossBreakdown>,
    pub target_refreshed: bool,
    pub eval: Option<EvalMetrics>,
}

/// Owns the networks, the target copy, the optimizer and the replay buffer.
pub struct Trainer {
    pub config: TrainConfig,
    pub env: EnvSpec,
    pub nets: Networks,
    pub params: ParameterSet,
    pub target: ParameterSet,
    pub optimizer: RmsProp,
    pub buffer: ReplayBuffer,
    pub topology: Topology,
    episodes: u64,
    env_steps: u64,
    updates: u64,
    rounds: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(env: EnvSpec, config: TrainConfig) -> Result<Self> {
        let arch = ArchConfig::new(env.obs_dim(), env.n_phases(), env.n_agents());
        Self::with_arch(env, config, arch)
    }

    pub fn with_arch(env: EnvSpec, config: TrainConfig, arch: ArchConfig) -> Result<Self> {
        config.validate()?;
        if arch.obs_dim != env.obs_dim() || arch.n_phases != env.n_phases() || arch.n_agents != env.n_agents() {
            return Err(crate::Error::InvalidArgument("architecture does not match the environment".into()));
        }
        let mut init = stream_rng(config.seed, INIT_STREAM);
        let topology = Topology::from_network(&env.network, arch.max_neighbors, arch.message_len);
        let (nets, params) = Networks::new(arch, &mut init)?;
        let target = params.clone();
        let optimizer = RmsProp::new(config.optimizer, &params);
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            rng: stream_rng(config.seed, SAMPLE_STREAM),
            config,
            env,
            nets,
            params,
            target,
            optimizer,
            topology,
            episodes: 0,
            env_steps: 0,
            updates: 0,
            rounds: 0,
        })
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon.at(self.env_steps)
    }

    fn rollout_options(&self, epsilon: f64) -> RolloutOptions {
        RolloutOptions {
            epsilon,
            comm_mode: self.config.comm_mode,
            stochastic: true,
            timing: self.config.message_timing,
            lambda: self.config.gate_temperature,
        }
    }

    /// Collects one episode per parallel environment with the current policy.
    /// Every environment draws from its own stream, so results do not depend
    /// on the order in which the environments are run.
    pub fn collect_round(&mut self) -> Result<Vec<Episode>> {
        let eps = self.epsilon();
        let opts = self.rollout_options(eps);
        let mut out = Vec::with_capacity(self.config.parallel_envs);
        for e in 0..self.config.parallel_envs {
            let mut rng = stream_rng(self.config.seed, env_stream(e, self.rounds));
            let mut sim = self.env.make(rng.random())?;
            out.push(rollout_episode(&mut sim, &self.nets, &self.params, &self.topology, &opts, &mut rng)?);
        }
        self.rounds += 1;
        Ok(out)
    }

    /// Stores episodes, advancing the episode and step counters. Returns
    /// whether the target network was refreshed.
    pub fn store(&mut self, episodes: Vec<Episode>) -> Result<bool> {
        let k = self.config.target_update_episodes.max(1);
        let before = self.episodes / k;
        for ep in episodes {
            self.env_steps += ep.steps as u64;
            self.episodes += 1;
            self.buffer.push(ep);
        }
        let refresh = self.episodes / k > before;
        if refresh {
            self.refresh_target()?;
        }
        Ok(refresh)
    }

    pub fn refresh_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.params)
    }

    /// One gradient step on a uniformly sampled batch, or `None` while the
    /// buffer holds fewer than a batch of episodes.
    pub fn train_iteration(&mut self) -> Result<Option<LossBreakdown>> {
        let b = self.config.batch_episodes;
        if self.buffer.len() < b {
            return Ok(None);
        }
        let idx = self.buffer.sample_indices(&mut self.rng, b)?;
        let batch: Vec<&Episode> = idx.iter().filter_map(|&i| self.buffer.get(i)).collect();
        self.params.zero_grads();
        let mut report = LossBreakdown::default();
        for chunk in batch.chunks(self.config.episodes_per_tape) {
            let weight = chunk.len() as f64 / b as f64;
            let mut tape = Tape::new();
            let nodes = build_loss(
                &mut tape,
                &self.nets,
                &self.params,
                &self.target,
                &self.topology,
                chunk,
                &self.config,
                weight,
                &mut self.rng,
            )?;
            tape.backward_into(nodes.total, &mut self.params)?;
            report.add_weighted(&tape, &nodes, weight, &self.config.comm);
        }
        report.grad_norm = self.optimizer.step(&mut self.params);
        self.updates += 1;
        Ok(Some(report))
    }

    /// Greedy evaluation of the current parameters under the configured gates.
    pub fn evaluate_now(&self) -> Result<EvalMetrics> {
        evaluate(
            &self.nets,
            &self.params,
            &self.env,
            self.config.eval_episodes,
            self.config.comm_mode,
            self.config.message_timing,
            self.config.seed ^ EVAL_SEED_SALT ^ self.episodes,
        )
    }

    /// One collection round followed by one training iteration.
    pub fn round(&mut self) -> Result<TrainLogRecord> {
        let epsilon = self.epsilon();
        let eps = self.collect_round()?;
        let train_return = eps.iter().map(Episode::total_reward).sum::<f64>() / eps.len() as f64;
        let before = self.episodes;
        let target_refreshed = self.store(eps)?;
        let loss = self.train_iteration()?;
        let every = self.config.eval_every;
        let eval = if every > 0 && self.episodes / every > before / every && self.config.eval_episodes > 0 {
            Some(self.evaluate_now()?)
        } else {
            None
        };
        Ok(TrainLogRecord {
            episode: self.episodes,
            env_steps: self.env_steps,
            updates: self.updates,
            epsilon,
            train_return,
            loss,
            target_refreshed,
            eval,
        })
    }

    /// Trains until `total_episodes` have been collected, passing every record to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&TrainLogRecord) -> Result<()>,
    {
        while self.episodes < self.config.total_episodes {
            let rec = self.round()?;
            sink(&rec)?;
        }
        Ok(())
    }

    /// Counters and the sampler position, enough to resume bit-exactly
    /// together with the parameters, optimizer state and replay buffer.
    pub fn progress(&self) -> TrainerProgress {
        TrainerProgress {
            episodes: self.episodes,
            env_steps: self.env_steps,
            updates: self.updates,
            rounds: self.rounds,
            sampler_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore_progress(&mut self, p: &TrainerProgress) {
        self.episodes = p.episodes;
        self.env_steps = p.env_steps;
        self.updates = p.updates;
        self.rounds = p.rounds;
        self.rng.set_word_pos(p.sampler_word_pos);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerProgress {
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub rounds: u64,
    pub sampler_word_pos: u128,
}
