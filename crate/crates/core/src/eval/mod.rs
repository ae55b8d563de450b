//! Greedy evaluation, traffic metrics from event logs, communication
//! accounting, message export and message influence.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comm::CommMode;
use crate::diff::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::nets::Networks;
use crate::traffic::{EnvSpec, EventKind, EventLog, LANES_PER_INTERSECTION};
use crate::train::{stream_rng, Episode, MessageTiming, RolloutOptions, Topology};

#[cfg(test)]
mod tests;

const EVAL_STREAM: u64 = 1 << 62;

/// Aggregate result of greedy evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    /// Halted vehicles in the detector zones per intersection and step.
    pub mean_queue_length: f64,
    /// Halted vehicle-seconds per completed vehicle; 0 when nothing completed.
    pub mean_wait_time: f64,
    pub no_completions: bool,
    pub mean_speed: f64,
    pub pct_communication: f64,
    pub mean_return: f64,
    pub completed: u64,
}

/// Sums gathered by one pass over an event log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrafficTotals {
    /// Σ over steps of the zone-halted count at the end of the step.
    pub queued_sum: f64,
    pub steps: u64,
    pub intersections: usize,
    pub halted_seconds: f64,
    pub completed: u64,
    pub speed_sum: f64,
    pub speed_samples: u64,
}

impl TrafficTotals {
    pub fn merge(&mut self, other: &TrafficTotals) {
        self.queued_sum += other.queued_sum;
        self.steps += other.steps;
        self.intersections = other.intersections;
        self.halted_seconds += other.halted_seconds;
        self.completed += other.completed;
        self.speed_sum += other.speed_sum;
        self.speed_samples += other.speed_samples;
    }

    pub fn metrics(&self, free_flow: f64) -> TrafficMetrics {
        let cells = self.steps as f64 * self.intersections.max(1) as f64;
        TrafficMetrics {
            mean_queue_length: if self.steps == 0 { 0.0 } else { self.queued_sum / cells },
            mean_wait_time: if self.completed == 0 { 0.0 } else { self.halted_seconds / self.completed as f64 },
            no_completions: self.completed == 0,
            mean_speed: if self.speed_samples == 0 { free_flow } else { self.speed_sum / self.speed_samples as f64 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficMetrics {
    pub mean_queue_length: f64,
    pub mean_wait_time: f64,
    pub no_completions: bool,
    pub mean_speed: f64,
}

/// Recomputes the traffic totals from the raw event log alone.
///
/// The queue of a step is the number of `queued` samples in the last
/// substep before its `step` record. The log must end with a `step` record.
pub fn traffic_totals(log: &EventLog) -> Result<TrafficTotals> {
    let mut t = TrafficTotals { intersections: log.num_intersections, ..Default::default() };
    let mut tick_queued = 0u64;
    let mut last_tick_queued = 0u64;
    for e in &log.events {
        match e.event {
            EventKind::Queued | EventKind::Halted | EventKind::Moving => {
                if e.event != EventKind::Moving {
                    t.halted_seconds += 1.0;
                }
                if e.event == EventKind::Queued {
                    tick_queued += 1;
                }
                t.speed_sum += e.value;
                t.speed_samples += 1;
            }
            EventKind::Tick => {
                last_tick_queued = tick_queued;
                tick_queued = 0;
            }
            EventKind::Step => {
                t.queued_sum += last_tick_queued as f64;
                t.steps += 1;
            }
            EventKind::Complete => t.completed += 1,
            EventKind::Insert | EventKind::Discharge => {}
        }
    }
    match log.events.last() {
        None => Ok(t),
        Some(e) if e.event == EventKind::Step => Ok(t),
        Some(e) => Err(Error::IncompleteLog(format!("log ends with a {} record at t={}", e.event.as_str(), e.time_s))),
    }
}

pub fn traffic_metrics(log: &EventLog, free_flow: f64) -> Result<TrafficMetrics> {
    Ok(traffic_totals(log)?.metrics(free_flow))
}

/// Hard gate bits counted over active (sender, slot) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GateTally {
    pub set: u64,
    pub total: u64,
}

impl GateTally {
    pub fn add(&mut self, other: GateTally) {
        self.set += other.set;
        self.total += other.total;
    }

    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.set as f64 / self.total as f64
        }
    }
}

/// Tallies gates `[steps, n_agents, slots * message_len]`, skipping inactive slots.
pub fn tally_gates(gates: &[f64], topology: &Topology, steps: usize) -> GateTally {
    let g = topology.gate_dim();
    let n = topology.n_agents;
    let l = topology.message_len;
    let mut tally = GateTally::default();
    for t in 0..steps {
        for i in 0..n {
            let row = &gates[(t * n + i) * g..(t * n + i + 1) * g];
            for s in 0..topology.slots {
                if !topology.is_active(i, s) {
                    continue;
                }
                for &c in &row[s * l..(s + 1) * l] {
                    tally.total += 1;
                    tally.set += u64::from(c > 0.5);
                }
            }
        }
    }
    tally
}

pub fn pct_communication(gates: &[f64], topology: &Topology, steps: usize) -> f64 {
    tally_gates(gates, topology, steps).percent()
}

fn eval_options(mode: CommMode, timing: MessageTiming) -> RolloutOptions {
    RolloutOptions { epsilon: 0.0, comm_mode: mode, stochastic: false, timing, lambda: crate::comm::GATE_TEMPERATURE }
}

/// Runs one greedy episode per index with recorded events; `observer` sees every network step.
fn greedy_episodes<F>(
    nets: &Networks,
    params: &ParameterSet,
    env: &EnvSpec,
    episodes: usize,
    mode: CommMode,
    timing: MessageTiming,
    seed: u64,
    mut per_episode: F,
    observer: &mut crate::train::StepObserver<'_>,
) -> Result<()>
where
    F: FnMut(Episode, &EventLog) -> Result<()>,
{
    let mode = mode.validated()?;
    let topology = Topology::from_network(&env.network, nets.arch.max_neighbors, nets.arch.message_len);
    let mut spec = env.clone();
    spec.sim.record_events = true;
    let opts = eval_options(mode, timing);
    for e in 0..episodes {
        let mut rng = stream_rng(seed, EVAL_STREAM | e as u64);
        let mut sim = spec.make(rng.random())?;
        let ep = crate::train::rollout_observed(&mut sim, nets, params, &topology, &opts, &mut rng, observer)?;
        per_episode(ep, sim.event_log())?;
    }
    Ok(())
}

/// Greedy evaluation: ε = 0, mean messages and hard gates unless `mode`
/// overrides them. Parameters are only read.
pub fn evaluate(
    nets: &Networks,
    params: &ParameterSet,
    env: &EnvSpec,
    episodes: usize,
    mode: CommMode,
    timing: MessageTiming,
    seed: u64,
) -> Result<EvalMetrics> {
    let topology = Topology::from_network(&env.network, nets.arch.max_neighbors, nets.arch.message_len);
    let mut totals = TrafficTotals { intersections: env.n_agents(), ..Default::default() };
    let mut tally = GateTally::default();
    let mut returns = 0.0;
    greedy_episodes(
        nets,
        params,
        env,
        episodes,
        mode,
        timing,
        seed,
        |ep, log| {
            totals.merge(&traffic_totals(log)?);
            tally.add(tally_gates(&ep.gates, &topology, ep.steps));
            returns += ep.total_reward();
            Ok(())
        },
        &mut |_, _, _, _| Ok(()),
    )?;
    let m = totals.metrics(env.sim.free_flow_speed);
    Ok(EvalMetrics {
        episodes,
        mean_queue_length: m.mean_queue_length,
        mean_wait_time: m.mean_wait_time,
        no_completions: m.no_completions,
        mean_speed: m.mean_speed,
        pct_communication: tally.percent(),
        mean_return: if episodes == 0 { 0.0 } else { returns / episodes as f64 },
        completed: totals.completed,
    })
}

/// One exported message with the sender's lane-averaged observation features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRow {
    pub episode: usize,
    pub step: usize,
    pub agent: usize,
    pub message: Vec<f64>,
    pub mean_speed: f64,
    pub mean_density: f64,
    pub mean_queue: f64,
    pub action: usize,
}

/// Lane averages `(speed, density, queue)` of one local observation.
pub fn observation_features(obs: &[f64]) -> (f64, f64, f64) {
    let k = LANES_PER_INTERSECTION as f64;
    let (mut s, mut d, mut q) = (0.0, 0.0, 0.0);
    for lane in 0..LANES_PER_INTERSECTION {
        d += obs[3 * lane];
        s += obs[3 * lane + 1];
        q += obs[3 * lane + 2];
    }
    (s / k, d / k, q / k)
}

/// Messages sent during greedy episodes, one row per (episode, step, agent).
pub fn export_messages(
    nets: &Networks,
    params: &ParameterSet,
    env: &EnvSpec,
    episodes: usize,
    timing: MessageTiming,
    seed: u64,
) -> Result<Vec<MessageRow>> {
    let l = nets.arch.message_len;
    let mut rows = Vec::new();
    let mut index = 0;
    greedy_episodes(
        nets,
        params,
        env,
        episodes,
        CommMode::Learned,
        timing,
        seed,
        |ep, _| {
            for t in 0..ep.steps {
                for i in 0..ep.n_agents {
                    let (s, d, q) = observation_features(ep.agent_obs(t, i));
                    let base = (t * ep.n_agents + i) * l;
                    rows.push(MessageRow {
                        episode: index,
                        step: t,
                        agent: i,
                        message: ep.messages[base..base + l].to_vec(),
                        mean_speed: s,
                        mean_density: d,
                        mean_queue: q,
                        action: ep.action(t, i),
                    });
                }
            }
            index += 1;
            Ok(())
        },
        &mut |_, _, _, _| Ok(()),
    )?;
    Ok(rows)
}

fn log_softmax(q: &[f64]) -> Vec<f64> {
    let m = q.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = q.iter().map(|v| crate::math::exp(v - m)).sum();
    let lz = m + crate::math::ln(z);
    q.iter().map(|v| v - lz).collect()
}

/// `KL(softmax(p) ‖ softmax(q))` of two logit rows.
pub fn policy_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(a, b)| crate::math::exp(*a) * (a - b)).sum::<f64>().max(0.0)
}

/// Mean over steps and agents of `KL(π with the delivered inbox ‖ π with a zero inbox)`
/// along greedy episodes of the learned policy.
pub fn message_influence(
    nets: &Networks,
    params: &ParameterSet,
    env: &EnvSpec,
    episodes: usize,
    mode: CommMode,
    timing: MessageTiming,
    seed: u64,
) -> Result<f64> {
    let a = nets.arch.clone();
    let width = a.obs_dim + a.n_phases;
    let steps = env.steps();
    let mut sum = 0.0;
    let mut count = 0u64;
    greedy_episodes(
        nets,
        params,
        env,
        episodes,
        mode,
        timing,
        seed,
        |_, _| Ok(()),
        &mut |tape, unroller, out, t| {
            if t == steps {
                return Ok(());
            }
            let rows = unroller.rows();
            let own = tape.slice(out.agent_input, 0, width)?;
            let zeros = tape.constant(Tensor::zeros(&[rows, a.inbox_dim()]))?;
            let silent = tape.concat(&[own, zeros])?;
            let q0 = unroller.counterfactual_q(tape, silent, out.h_prev)?;
            let (q, q0) = (tape.value(out.q), tape.value(q0));
            for r in 0..rows {
                sum += policy_kl(q.row(r), q0.row(r));
                count += 1;
            }
            Ok(())
        },
    )?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Convenience: the gate values a mode would deliver for `bits` draws.
pub fn sample_mode_gates<R: Rng + ?Sized>(mode: CommMode, bits: usize, rng: &mut R) -> Vec<f64> {
    match mode {
        CommMode::Full => vec![1.0; bits],
        CommMode::None => vec![0.0; bits],
        CommMode::Random(p) => (0..bits).map(|_| f64::from(u8::from(rng.random::<f64>() < p))).collect(),
        CommMode::Learned => vec![0.0; bits],
    }
}
