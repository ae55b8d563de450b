//! One recurrent step of every network for a block of episodes.
//!
//! Rows are laid out `[episode][agent]`. Rollouts use a block of one
//! episode, training a block of several; every primitive works row by row,
//! so both produce bit-identical values for the same inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::comm::{tape_gumbel_sigmoid, tape_sample_message};
use crate::diff::{NodeId, ParameterSet, Tape, Tensor, GATHER_ZERO};
use crate::error::{shape_err, Result};
use crate::nets::{BoundAgentNet, BoundCommNet, BoundPosteriorNet, Networks};
use crate::traffic::{RoadNetwork, Side};

use super::MessageTiming;

/// Who can hear whom, in canonical neighbour-slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub n_agents: usize,
    pub slots: usize,
    pub message_len: usize,
    /// For recipient `j` and inbox slot `s`: the sender and the sender's outgoing slot.
    incoming: Vec<Option<(usize, usize)>>,
}

impl Topology {
    pub fn from_network(network: &RoadNetwork, slots: usize, message_len: usize) -> Self {
        let n = network.num_intersections();
        let mut incoming = vec![None; n * slots];
        for j in 0..n {
            for s in 0..slots.min(4) {
                if let Some(i) = network.neighbor(j, Side::from_index(s)) {
                    let back = network.slot_of(i, j).expect("adjacency is symmetric");
                    incoming[j * slots + s] = Some((i, back.index()));
                }
            }
        }
        Self { n_agents: n, slots, message_len, incoming }
    }

    pub fn gate_dim(&self) -> usize {
        self.slots * self.message_len
    }

    pub fn incoming(&self, recipient: usize, slot: usize) -> Option<(usize, usize)> {
        self.incoming[recipient * self.slots + slot]
    }

    /// Whether sender `i` has a recipient behind its outgoing slot `s`.
    pub fn is_active(&self, sender: usize, slot: usize) -> bool {
        self.incoming.iter().any(|x| *x == Some((sender, slot)))
    }

    /// Active `(sender, slot)` pairs in sender-major order.
    pub fn active_pairs(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for i in 0..self.n_agents {
            for s in 0..self.slots {
                if self.is_active(i, s) {
                    v.push((i, s));
                }
            }
        }
        v
    }

    /// Gather index from outgoing gated messages `[rows, gate_dim]` to inboxes `[rows, gate_dim]`.
    pub fn inbox_index(&self, episodes: usize) -> Vec<u32> {
        let (n, l, g) = (self.n_agents, self.message_len, self.gate_dim());
        let mut idx = Vec::with_capacity(episodes * n * g);
        for b in 0..episodes {
            for j in 0..n {
                for s in 0..self.slots {
                    match self.incoming(j, s) {
                        Some((i, back)) => {
                            let base = ((b * n + i) * g + back * l) as u32;
                            idx.extend((0..l as u32).map(|k| base + k));
                        }
                        None => idx.extend(core::iter::repeat(GATHER_ZERO).take(l)),
                    }
                }
            }
        }
        idx
    }

    /// Gather index selecting the gate logits of every active pair: `[episodes * pairs, message_len]`.
    pub fn pair_gate_index(&self, episodes: usize) -> Vec<u32> {
        let (n, l, g) = (self.n_agents, self.message_len, self.gate_dim());
        let pairs = self.active_pairs();
        let mut idx = Vec::new();
        for b in 0..episodes {
            for &(i, s) in &pairs {
                let base = ((b * n + i) * g + s * l) as u32;
                idx.extend((0..l as u32).map(|k| base + k));
            }
        }
        idx
    }

    /// Sender row of every active pair.
    pub fn pair_rows(&self, episodes: usize) -> Vec<Option<usize>> {
        let pairs = self.active_pairs();
        let mut rows = Vec::new();
        for b in 0..episodes {
            for &(i, _) in &pairs {
                rows.push(Some(b * self.n_agents + i));
            }
        }
        rows
    }
}

/// Source of the gate values for one step.
#[derive(Debug, Clone, PartialEq)]
pub enum GateInput {
    /// Gumbel-sigmoid relaxation with the given logistic noise `[rows, gate_dim]`.
    Relaxed(Tensor),
    /// Noise-free hard threshold of the learned logits.
    Hard,
    /// Given gate values (full or random communication).
    Fixed(Tensor),
    /// No messages at all; the communication network is not run.
    Silent,
}

/// Per-step constants.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// `[rows, obs_dim + n_phases]`: observation then previous-action one-hot.
    pub features: Tensor,
    /// Message noise `[rows, message_len]`; `None` sends the mean.
    pub message_noise: Option<Tensor>,
    pub gates: GateInput,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub q: NodeId,
    /// `[features | inbox]` fed to the agent network; also the posterior input.
    pub agent_input: NodeId,
    pub q_inbox: NodeId,
    pub mu: Option<NodeId>,
    pub logvar: Option<NodeId>,
    pub gate_logits: Option<NodeId>,
    pub gates: Option<NodeId>,
    pub messages: Option<NodeId>,
    /// Agent hidden state before this step.
    pub h_prev: NodeId,
}

/// Recurrent state of every network over a block of episodes.
pub struct Unroller {
    agent: BoundAgentNet,
    comm: Option<BoundCommNet>,
    posterior: Option<BoundPosteriorNet>,
    timing: MessageTiming,
    lambda: f64,
    rows: usize,
    gate_dim: usize,
    inbox_index: Vec<u32>,
    repeat_index: Vec<u32>,
    h: NodeId,
    hc: NodeId,
    hr: NodeId,
    comm_inbox: NodeId,
}

impl Unroller {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tape: &mut Tape,
        nets: &Networks,
        params: &ParameterSet,
        topology: &Topology,
        episodes: usize,
        timing: MessageTiming,
        lambda: f64,
        with_comm: bool,
        with_posterior: bool,
    ) -> Result<Self> {
        let a = &nets.arch;
        if topology.n_agents != a.n_agents || topology.gate_dim() != a.gate_dim() {
            return Err(shape_err("unroll", "topology does not match the architecture".into()));
        }
        let rows = episodes * a.n_agents;
        let agent = nets.agent.bind(tape, params)?;
        let comm = if with_comm { Some(nets.comm.bind(tape, params)?) } else { None };
        let posterior = if with_posterior { Some(nets.posterior.bind(tape, params)?) } else { None };
        let h = tape.constant(Tensor::zeros(&[rows, a.hidden]))?;
        let comm_inbox = tape.constant(Tensor::zeros(&[rows, a.inbox_dim()]))?;
        let g = a.gate_dim();
        let l = a.message_len;
        let repeat_index = (0..rows).flat_map(|r| (0..g).map(move |k| (r * l + k % l) as u32)).collect();
        Ok(Self {
            agent,
            comm,
            posterior,
            timing,
            lambda,
            rows,
            gate_dim: g,
            inbox_index: topology.inbox_index(episodes),
            repeat_index,
            h,
            hc: h,
            hr: h,
            comm_inbox,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn step(&mut self, tape: &mut Tape, inputs: StepInputs) -> Result<StepOutput> {
        if inputs.features.rows() != self.rows {
            return Err(shape_err("unroll", alloc::format!("{} feature rows for {}", inputs.features.rows(), self.rows)));
        }
        let features = tape.constant(inputs.features)?;
        let mut out = StepOutput {
            q: features,
            agent_input: features,
            q_inbox: self.comm_inbox,
            mu: None,
            logvar: None,
            gate_logits: None,
            gates: None,
            messages: None,
            h_prev: self.h,
        };
        let new_inbox = match (&self.comm, inputs.gates) {
            (Some(comm), gates) if gates != GateInput::Silent => {
                let input = tape.concat(&[features, self.comm_inbox])?;
                let c = comm.forward(tape, input, self.hc)?;
                self.hc = c.h;
                let m = match inputs.message_noise {
                    Some(eps) => {
                        let eps = tape.constant(eps)?;
                        tape_sample_message(tape, c.mu, c.logvar, eps)?
                    }
                    None => c.mu,
                };
                let gate = match gates {
                    GateInput::Relaxed(noise) => {
                        let noise = tape.constant(noise)?;
                        tape_gumbel_sigmoid(tape, c.gate_logits, noise, self.lambda)?
                    }
                    GateInput::Hard => {
                        let bits = tape.value(c.gate_logits).data().iter().map(|x| f64::from(u8::from(*x > 0.0))).collect();
                        tape.constant(Tensor::new(alloc::vec![self.rows, self.gate_dim], bits)?)?
                    }
                    GateInput::Fixed(values) => tape.constant(values)?,
                    GateInput::Silent => unreachable!(),
                };
                let m_rep = tape.gather(m, self.repeat_index.clone(), &[self.rows, self.gate_dim])?;
                let gated = tape.mul(m_rep, gate)?;
                out.mu = Some(c.mu);
                out.logvar = Some(c.logvar);
                out.gate_logits = Some(c.gate_logits);
                out.gates = Some(gate);
                out.messages = Some(m);
                tape.gather(gated, self.inbox_index.clone(), &[self.rows, self.gate_dim])?
            }
            _ => self.comm_inbox,
        };
        let q_inbox = match self.timing {
            MessageTiming::Delayed => self.comm_inbox,
            MessageTiming::SameStep => new_inbox,
        };
        let input = tape.concat(&[features, q_inbox])?;
        let (q, h) = self.agent.forward(tape, input, self.h)?;
        self.h = h;
        self.comm_inbox = new_inbox;
        out.q = q;
        out.agent_input = input;
        out.q_inbox = q_inbox;
        Ok(out)
    }

    /// Q-values for an arbitrary agent input from a given hidden state, without advancing anything.
    pub fn counterfactual_q(&self, tape: &mut Tape, agent_input: NodeId, h: NodeId) -> Result<NodeId> {
        Ok(self.agent.forward(tape, agent_input, h)?.0)
    }

    /// Advances the posterior network on a step's agent input and returns `log q`.
    pub fn posterior(&mut self, tape: &mut Tape, agent_input: NodeId) -> Result<NodeId> {
        let net = self.posterior.ok_or_else(|| crate::Error::InvalidArgument("posterior network not bound".into()))?;
        let (logq, hr) = net.forward(tape, agent_input, self.hr)?;
        self.hr = hr;
        Ok(logq)
    }
}
