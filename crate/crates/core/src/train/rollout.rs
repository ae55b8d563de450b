use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::comm::{logistic_noise, CommMode};
use crate::diff::{ParameterSet, Tape, Tensor};
use crate::error::Result;
use crate::nets::{one_hot, select_action, Networks};
use crate::traffic::Simulation;

use super::buffer::Episode;
use super::unroll::{GateInput, StepInputs, StepOutput, Topology, Unroller};
use super::MessageTiming;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub epsilon: f64,
    pub comm_mode: CommMode,
    /// Sample messages and relax gates (training); otherwise send means through hard gates.
    pub stochastic: bool,
    pub timing: MessageTiming,
    pub lambda: f64,
}

/// Per-step features `[obs | previous action one-hot]` for one episode block.
pub(crate) fn features(obs: &[Vec<f64>], prev: &[Option<usize>], n_phases: usize) -> Result<Tensor> {
    let rows = obs.len();
    let width = obs[0].len() + n_phases;
    let mut data = Vec::with_capacity(rows * width);
    for (o, p) in obs.iter().zip(prev) {
        data.extend_from_slice(o);
        data.extend_from_slice(&one_hot(*p, n_phases));
    }
    Tensor::new(vec![rows, width], data)
}

/// Draws the per-step noise for `rows` agents and returns the stored samples with the gate input.
pub(crate) fn draw_step_noise<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    message_len: usize,
    gate_dim: usize,
    mode: CommMode,
    stochastic: bool,
) -> Result<(Vec<f64>, Vec<f64>, Option<Tensor>, GateInput)> {
    if mode == CommMode::None {
        return Ok((vec![0.0; rows * message_len], vec![0.0; rows * gate_dim], None, GateInput::Silent));
    }
    let (msg, eps) = if stochastic {
        let m: Vec<f64> = (0..rows * message_len).map(|_| StandardNormal.sample(rng)).collect();
        let t = Tensor::new(vec![rows, message_len], m.clone())?;
        (m, Some(t))
    } else {
        (vec![0.0; rows * message_len], None)
    };
    let (samples, gate) = match mode {
        CommMode::Learned if stochastic => {
            let g: Vec<f64> = (0..rows * gate_dim).map(|_| logistic_noise(rng)).collect();
            (g.clone(), GateInput::Relaxed(Tensor::new(vec![rows, gate_dim], g)?))
        }
        CommMode::Learned => (vec![0.0; rows * gate_dim], GateInput::Hard),
        CommMode::Full => {
            let g = vec![1.0; rows * gate_dim];
            (g.clone(), GateInput::Fixed(Tensor::new(vec![rows, gate_dim], g)?))
        }
        CommMode::Random(p) => {
            let g: Vec<f64> = (0..rows * gate_dim).map(|_| f64::from(u8::from(rng.random::<f64>() < p))).collect();
            (g.clone(), GateInput::Fixed(Tensor::new(vec![rows, gate_dim], g)?))
        }
        CommMode::None => unreachable!(),
    };
    Ok((msg, samples, eps, gate))
}

/// Runs one episode, choosing actions ε-greedily, and records everything needed for replay.
pub fn rollout_episode<R: Rng + ?Sized>(
    sim: &mut Simulation,
    nets: &Networks,
    params: &ParameterSet,
    topology: &Topology,
    options: &RolloutOptions,
    rng: &mut R,
) -> Result<Episode> {
    rollout_observed(sim, nets, params, topology, options, rng, &mut |_, _, _, _| Ok(()))
}

/// Observer invoked after every network step with the tape, the unroller,
/// the step output and the step index.
pub type StepObserver<'a> = dyn FnMut(&mut Tape, &Unroller, &StepOutput, usize) -> Result<()> + 'a;

pub(crate) fn rollout_observed<R: Rng + ?Sized>(
    sim: &mut Simulation,
    nets: &Networks,
    params: &ParameterSet,
    topology: &Topology,
    options: &RolloutOptions,
    rng: &mut R,
    observer: &mut StepObserver<'_>,
) -> Result<Episode> {
    let a = &nets.arch;
    let n = a.n_agents;
    let steps = sim.config().steps_per_episode;
    let (l, g) = (a.message_len, a.gate_dim());
    let silent = options.comm_mode == CommMode::None;
    let mut tape = Tape::new();
    let mut unroller =
        Unroller::new(&mut tape, nets, params, topology, 1, options.timing, options.lambda, !silent, false)?;
    let mut ep = Episode {
        n_agents: n,
        obs_dim: a.obs_dim,
        n_phases: a.n_phases,
        message_len: l,
        gate_dim: g,
        steps,
        comm_mode: options.comm_mode,
        obs: Vec::with_capacity((steps + 1) * n * a.obs_dim),
        actions: Vec::with_capacity(steps * n),
        rewards: Vec::with_capacity(steps),
        terminal: Vec::with_capacity(steps),
        message_noise: Vec::new(),
        gate_samples: Vec::new(),
        gates: Vec::new(),
        messages: Vec::new(),
        q_values: Vec::new(),
        metrics: Default::default(),
        start_offset: sim.start_offset(),
    };
    let mut obs = sim.observe_all();
    let mut prev: Vec<Option<usize>> = vec![None; n];
    let mask = vec![true; a.n_phases];
    for t in 0..=steps {
        for o in &obs {
            ep.obs.extend_from_slice(o);
        }
        let (msg, samples, eps, gate) = draw_step_noise(rng, n, l, g, options.comm_mode, options.stochastic)?;
        ep.message_noise.extend_from_slice(&msg);
        ep.gate_samples.extend_from_slice(&samples);
        let inputs = StepInputs { features: features(&obs, &prev, a.n_phases)?, message_noise: eps, gates: gate };
        let out = unroller.step(&mut tape, inputs)?;
        match out.gates {
            Some(gn) => ep.gates.extend_from_slice(tape.value(gn).data()),
            None => ep.gates.extend(core::iter::repeat(0.0).take(n * g)),
        }
        match out.messages {
            Some(m) => ep.messages.extend_from_slice(tape.value(m).data()),
            None => ep.messages.extend(core::iter::repeat(0.0).take(n * l)),
        }
        observer(&mut tape, &unroller, &out, t)?;
        if t == steps {
            break;
        }
        let q = tape.value(out.q).clone();
        ep.q_values.extend_from_slice(q.data());
        let mut actions = Vec::with_capacity(n);
        for i in 0..n {
            actions.push(select_action(q.row(i), options.epsilon, rng, &mask)?);
        }
        let outcome = sim.advance(&actions)?;
        ep.actions.extend(actions.iter().map(|x| *x as u32));
        ep.rewards.push(outcome.reward);
        ep.terminal.push(outcome.terminal);
        prev = actions.into_iter().map(Some).collect();
        obs = outcome.observations;
    }
    ep.metrics = *sim.metrics();
    Ok(ep)
}
