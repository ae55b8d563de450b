use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{communication_loss, gather_rows, CommLossConfig, CommMode};
use crate::diff::{NodeId, ParameterSet, Tape, Tensor};
use crate::error::{shape_err, Result};
use crate::nets::{argmax, Networks};

use super::buffer::Episode;
use super::rollout::draw_step_noise;
use super::unroll::{GateInput, StepInputs, Topology, Unroller};
use super::TrainConfig;

/// Loss components on a tape. `total` carries the chunk weight; the others do not.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub td: NodeId,
    pub ce: Option<NodeId>,
    pub kl_message: Option<NodeId>,
    pub kl_gate: Option<NodeId>,
    pub total: NodeId,
}

/// Scalar diagnostics of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub td: f64,
    pub ce: f64,
    pub kl_message: f64,
    pub kl_gate: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LossBreakdown {
    pub(crate) fn add_weighted(&mut self, tape: &Tape, nodes: &LossNodes, weight: f64, comm: &CommLossConfig) {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).item());
        let (td, ce, km, kc) = (tape.value(nodes.td).item(), v(nodes.ce), v(nodes.kl_message), v(nodes.kl_gate));
        self.td += weight * td;
        self.ce += weight * ce;
        self.kl_message += weight * km;
        self.kl_gate += weight * kc;
        self.total += weight * (td + ce + comm.beta_m * km + comm.beta_c * kc);
    }
}

fn check_batch(batch: &[&Episode], nets: &Networks) -> Result<usize> {
    let first = batch.first().ok_or_else(|| shape_err("loss", "empty batch".into()))?;
    let a = &nets.arch;
    for ep in batch {
        if ep.steps != first.steps || ep.n_agents != a.n_agents || ep.obs_dim != a.obs_dim || ep.n_phases != a.n_phases {
            return Err(shape_err("loss", "episodes do not match each other or the architecture".into()));
        }
    }
    if first.steps == 0 {
        return Err(shape_err("loss", "episodes have no steps".into()));
    }
    Ok(first.steps)
}

/// Network inputs for every step `0..=T` of a block, from stored (or fresh) noise.
pub(crate) fn block_inputs<R: Rng + ?Sized>(
    batch: &[&Episode],
    nets: &Networks,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<StepInputs>> {
    let a = &nets.arch;
    let (n, b, l, g) = (a.n_agents, batch.len(), a.message_len, a.gate_dim());
    let rows = b * n;
    let steps = batch[0].steps;
    let mut out = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let mut feat = Vec::with_capacity(rows * (a.obs_dim + a.n_phases));
        for ep in batch {
            for i in 0..n {
                feat.extend_from_slice(ep.agent_obs(t, i));
                feat.extend_from_slice(&crate::nets::one_hot(ep.prev_action(t, i), a.n_phases));
            }
        }
        let features = Tensor::new(vec![rows, a.obs_dim + a.n_phases], feat)?;
        let (message_noise, gates) = if config.comm_mode == CommMode::None {
            (None, GateInput::Silent)
        } else if config.fresh_noise {
            let (_, _, eps, gate) = draw_step_noise(rng, rows, l, g, config.comm_mode, true)?;
            (eps, gate)
        } else {
            let eps: Vec<f64> = batch.iter().flat_map(|ep| ep.message_noise_at(t).iter().copied()).collect();
            let gs: Vec<f64> = batch.iter().flat_map(|ep| ep.gate_samples_at(t).iter().copied()).collect();
            let gs = Tensor::new(vec![rows, g], gs)?;
            let gate = match config.comm_mode {
                CommMode::Learned => GateInput::Relaxed(gs),
                _ => GateInput::Fixed(gs),
            };
            (Some(Tensor::new(vec![rows, l], eps)?), gate)
        };
        out.push(StepInputs { features, message_noise, gates });
    }
    Ok(out)
}

/// Global states of steps `range` for every episode, rows ordered `[episode][step]`.
fn states(batch: &[&Episode], range: core::ops::Range<usize>) -> Result<Tensor> {
    let s = batch[0].state_at(0).len();
    let mut data = Vec::with_capacity(batch.len() * range.len() * s);
    for ep in batch {
        for t in range.clone() {
            data.extend_from_slice(ep.state_at(t));
        }
    }
    Tensor::new(vec![batch.len() * range.len(), s], data)
}

/// Gathers `[rows_per_step, width]` nodes of `steps` consecutive steps into
/// `[steps * rows, width]` (step-major), via one column concat and one gather.
fn stack_steps(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let rows = tape.value(nodes[0]).rows();
    let w = tape.value(nodes[0]).cols();
    let t_len = nodes.len();
    let wide = tape.concat(nodes)?;
    let mut idx = Vec::with_capacity(t_len * rows * w);
    for t in 0..t_len {
        for r in 0..rows {
            for k in 0..w {
                idx.push((r * t_len * w + t * w + k) as u32);
            }
        }
    }
    tape.gather(wide, idx, &[t_len * rows, w])
}

/// TD targets `r + γ (1 - terminal) Q⁻_total(s', greedy)` in `[episode][step]` order.
///
/// `online_next_q[t]` (rows `[episode][agent]`) selects the greedy actions for
/// double Q-learning; otherwise the target utilities select them.
pub fn td_targets<R: Rng + ?Sized>(
    nets: &Networks,
    target: &ParameterSet,
    topology: &Topology,
    batch: &[&Episode],
    config: &TrainConfig,
    online_q: Option<&[Tensor]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let steps = check_batch(batch, nets)?;
    let inputs = block_inputs(batch, nets, config, rng)?;
    target_from_inputs(nets, target, topology, batch, config, online_q, inputs, steps)
}

#[allow(clippy::too_many_arguments)]
fn target_from_inputs(
    nets: &Networks,
    target: &ParameterSet,
    topology: &Topology,
    batch: &[&Episode],
    config: &TrainConfig,
    online_q: Option<&[Tensor]>,
    inputs: Vec<StepInputs>,
    steps: usize,
) -> Result<Vec<f64>> {
    let a = &nets.arch;
    let (n, b, p) = (a.n_agents, batch.len(), a.n_phases);
    let with_comm = config.comm_mode != CommMode::None;
    let mut tape = Tape::new();
    let mut un = Unroller::new(
        &mut tape,
        nets,
        target,
        topology,
        b,
        config.message_timing,
        config.gate_temperature,
        with_comm,
        false,
    )?;
    let mut qs = Vec::with_capacity(steps + 1);
    for inp in inputs {
        let out = un.step(&mut tape, inp)?;
        qs.push(tape.value(out.q).clone());
    }
    // Greedy utilities at t + 1, rows [episode][step].
    let mut chosen = Vec::with_capacity(b * steps * n);
    for e in 0..b {
        for t in 0..steps {
            for i in 0..n {
                let row = e * n + i;
                let tq = &qs[t + 1].data()[row * p..(row + 1) * p];
                let pick = match online_q {
                    Some(oq) => argmax(&oq[t + 1].data()[row * p..(row + 1) * p]),
                    None => argmax(tq),
                };
                chosen.push(tq[pick]);
            }
        }
    }
    let qn = tape.constant(Tensor::new(vec![b * steps, n], chosen)?)?;
    let sn = tape.constant(states(batch, 1..steps + 1)?)?;
    let mixed = nets.mixer.forward(&mut tape, target, qn, sn)?;
    let next = tape.value(mixed).data();
    let mut y = Vec::with_capacity(b * steps);
    for (e, ep) in batch.iter().enumerate() {
        for t in 0..steps {
            let r = config.reward_scale * ep.rewards[t];
            let boot = if ep.terminal[t] { 0.0 } else { config.gamma * next[e * steps + t] };
            y.push(r + boot);
        }
    }
    Ok(y)
}

/// Builds the joint objective `TD + CE + β_m KL_m + β_c KL_c` for a block of
/// episodes on `tape`. The returned `total` is multiplied by `weight` so that
/// blocks of a batch can be accumulated into one gradient.
#[allow(clippy::too_many_arguments)]
pub fn build_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    nets: &Networks,
    params: &ParameterSet,
    target: &ParameterSet,
    topology: &Topology,
    batch: &[&Episode],
    config: &TrainConfig,
    weight: f64,
    rng: &mut R,
) -> Result<LossNodes> {
    let steps = check_batch(batch, nets)?;
    let a = &nets.arch;
    let (n, b, p) = (a.n_agents, batch.len(), a.n_phases);
    let with_comm = config.comm_mode != CommMode::None;
    let inputs = block_inputs(batch, nets, config, rng)?;
    let target_inputs = inputs.clone();

    let mut un = Unroller::new(
        tape,
        nets,
        params,
        topology,
        b,
        config.message_timing,
        config.gate_temperature,
        with_comm,
        with_comm,
    )?;
    let mut q_nodes = Vec::with_capacity(steps + 1);
    let mut q_values = Vec::with_capacity(steps + 1);
    let mut logq = Vec::new();
    let mut mus = Vec::new();
    let mut logvars = Vec::new();
    let mut logits = Vec::new();
    for (t, inp) in inputs.into_iter().enumerate() {
        let out = un.step(tape, inp)?;
        q_values.push(tape.value(out.q).clone());
        if t == steps {
            break;
        }
        q_nodes.push(out.q);
        if with_comm {
            logq.push(un.posterior(tape, out.agent_input)?);
            if let (Some(m), Some(lv), Some(g)) = (out.mu, out.logvar, out.gate_logits) {
                mus.push(m);
                logvars.push(lv);
                logits.push(g);
            }
        }
    }

    let online = if config.double_q { Some(q_values.as_slice()) } else { None };
    let y = target_from_inputs(nets, target, topology, batch, config, online, target_inputs, steps)?;

    // Chosen utilities, rows [episode][step].
    let stacked = tape.concat(&q_nodes)?;
    let mut idx = Vec::with_capacity(b * steps * n);
    for (e, ep) in batch.iter().enumerate() {
        for t in 0..steps {
            for i in 0..n {
                let row = e * n + i;
                idx.push((row * steps * p + t * p + ep.action(t, i)) as u32);
            }
        }
    }
    let chosen = tape.gather(stacked, idx, &[b * steps, n])?;
    let s = tape.constant(states(batch, 0..steps)?)?;
    let q_tot = nets.mixer.forward(tape, params, chosen, s)?;
    let y = tape.constant(Tensor::new(vec![b * steps, 1], y)?)?;
    let err = tape.squared_error(q_tot, y)?;
    let td = tape.mean(err)?;

    let mut nodes = LossNodes { td, ce: None, kl_message: None, kl_gate: None, total: td };
    if with_comm {
        let q_all = stack_steps(tape, &q_nodes)?;
        let lq_all = stack_steps(tape, &logq)?;
        let pair_rows = topology.pair_rows(b);
        let comm = if pair_rows.is_empty() {
            communication_loss(tape, q_all, lq_all, None, &config.comm)?
        } else {
            let mu_all = stack_steps(tape, &mus)?;
            let lv_all = stack_steps(tape, &logvars)?;
            let lg_all = stack_steps(tape, &logits)?;
            let rows_per_step = b * n;
            let mut rows = Vec::with_capacity(steps * pair_rows.len());
            let mut gidx = Vec::new();
            let per_step_gate = topology.pair_gate_index(b);
            let g = a.gate_dim();
            for t in 0..steps {
                rows.extend(pair_rows.iter().map(|r| r.map(|r| t * rows_per_step + r)));
                gidx.extend(per_step_gate.iter().map(|ix| ix + (t * rows_per_step * g) as u32));
            }
            let pm = gather_rows(tape, mu_all, &rows)?;
            let plv = gather_rows(tape, lv_all, &rows)?;
            let pg = tape.gather(lg_all, gidx, &[rows.len(), a.message_len])?;
            let mut cfg = config.comm;
            if config.comm_mode != CommMode::Learned {
                // Gates are not produced by the network, so their penalty is inert.
                cfg.beta_c = 0.0;
            }
            communication_loss(tape, q_all, lq_all, Some((pm, plv, pg)), &cfg)?
        };
        nodes.ce = Some(comm.ce);
        nodes.kl_message = Some(comm.kl_message);
        nodes.kl_gate = Some(comm.kl_gate);
        nodes.total = tape.add(td, comm.total)?;
    }
    if weight != 1.0 {
        nodes.total = tape.scale(nodes.total, weight)?;
    }
    Ok(nodes)
}
