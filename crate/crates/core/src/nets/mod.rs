//! Agent Q-network, communication network, posterior network and the
//! monotonic mixer. All agents of a role share one set of parameters.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{BoundGru, BoundLinear, GruCell, Linear, NodeId, ParameterSet, Tape, Tensor};
use crate::error::{shape_err, Error, Result};


/// Message coordinates per sender.
pub const MESSAGE_LEN: usize = 5;
/// Neighbour slots per agent (N, E, S, W).
pub const MAX_NEIGHBORS: usize = 4;

/// Layer widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub obs_dim: usize,
    pub n_phases: usize,
    pub n_agents: usize,
    pub message_len: usize,
    pub max_neighbors: usize,
    pub hidden: usize,
    pub encoder: usize,
    pub mixer_embed: usize,
    pub hyper_hidden: usize,
}

impl ArchConfig {
    pub fn new(obs_dim: usize, n_phases: usize, n_agents: usize) -> Self {
        Self {
            obs_dim,
            n_phases,
            n_agents,
            message_len: MESSAGE_LEN,
            max_neighbors: MAX_NEIGHBORS,
            hidden: 64,
            encoder: 64,
            mixer_embed: 32,
            hyper_hidden: 64,
        }
    }

    pub fn inbox_dim(&self) -> usize {
        self.max_neighbors * self.message_len
    }

    /// Width of `[obs | previous action one-hot | inbox]`.
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_phases + self.inbox_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.obs_dim * self.n_agents
    }

    pub fn gate_dim(&self) -> usize {
        self.max_neighbors * self.message_len
    }
}

/// ELU encoder followed by a GRU core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecurrentCore {
    pub encoder: Linear,
    pub gru: GruCell,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCore {
    pub encoder: BoundLinear,
    pub gru: BoundGru,
}

impl RecurrentCore {
    fn register<R: Rng + ?Sized>(params: &mut ParameterSet, name: &str, a: &ArchConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: Linear::register(params, &format!("{name}.encoder"), a.input_dim(), a.encoder, rng)?,
            gru: GruCell::register(params, &format!("{name}.gru"), a.encoder, a.hidden, rng)?,
        })
    }

    fn bind(&self, tape: &mut Tape, params: &ParameterSet) -> Result<BoundCore> {
        Ok(BoundCore { encoder: self.encoder.bind(tape, params)?, gru: self.gru.bind(tape, params)? })
    }
}

impl BoundCore {
    pub fn step(&self, tape: &mut Tape, input: NodeId, h: NodeId) -> Result<NodeId> {
        let e = self.encoder.forward(tape, input)?;
        let e = tape.elu(e)?;
        self.gru.step(tape, e, h)
    }
}

/// Recurrent per-agent Q-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentNet {
    pub core: RecurrentCore,
    pub head: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAgentNet {
    pub core: BoundCore,
    pub head: BoundLinear,
}

impl AgentNet {
    pub fn register<R: Rng + ?Sized>(params: &mut ParameterSet, a: &ArchConfig, rng: &mut R) -> Result<Self> {
        let core = RecurrentCore::register(params, "agent", a, rng)?;
        let head = Linear::register(params, "agent.q", a.hidden, a.n_phases, rng)?;
        Ok(Self { core, head })
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParameterSet) -> Result<BoundAgentNet> {
        Ok(BoundAgentNet { core: self.core.bind(tape, params)?, head: self.head.bind(tape, params)? })
    }
}

impl BoundAgentNet {
    /// `input: [rows, input_dim]`, `h: [rows, hidden]` → `(q: [rows, phases], h')`.
    pub fn forward(&self, tape: &mut Tape, input: NodeId, h: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.core.step(tape, input, h)?;
        Ok((self.head.forward(tape, h)?, h))
    }
}

/// Output nodes of [`BoundCommNet::forward`].
#[derive(Debug, Clone, Copy)]
pub struct CommOutput {
    pub mu: NodeId,
    pub logvar: NodeId,
    /// `[rows, max_neighbors * message_len]`, slot-major.
    pub gate_logits: NodeId,
    pub h: NodeId,
}

/// Recurrent communication network: one Gaussian message per sender and a
/// gate logit per (recipient slot, message coordinate).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommNet {
    pub core: RecurrentCore,
    pub mu: Linear,
    pub logvar: Linear,
    pub gate: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCommNet {
    pub core: BoundCore,
    pub mu: BoundLinear,
    pub logvar: BoundLinear,
    pub gate: BoundLinear,
}

impl CommNet {
    pub fn register<R: Rng + ?Sized>(params: &mut ParameterSet, a: &ArchConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            core: RecurrentCore::register(params, "comm", a, rng)?,
            mu: Linear::register(params, "comm.mu", a.hidden, a.message_len, rng)?,
            logvar: Linear::register(params, "comm.logvar", a.hidden, a.message_len, rng)?,
            gate: Linear::register(params, "comm.gate", a.hidden, a.gate_dim(), rng)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParameterSet) -> Result<BoundCommNet> {
        Ok(BoundCommNet {
            core: self.core.bind(tape, params)?,
            mu: self.mu.bind(tape, params)?,
            logvar: self.logvar.bind(tape, params)?,
            gate: self.gate.bind(tape, params)?,
        })
    }
}

impl BoundCommNet {
    pub fn forward(&self, tape: &mut Tape, input: NodeId, hc: NodeId) -> Result<CommOutput> {
        let h = self.core.step(tape, input, hc)?;
        Ok(CommOutput {
            mu: self.mu.forward(tape, h)?,
            logvar: self.logvar.forward(tape, h)?,
            gate_logits: self.gate.forward(tape, h)?,
            h,
        })
    }
}

/// Variational posterior over a recipient's action given its trajectory and gated inbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosteriorNet {
    pub core: RecurrentCore,
    pub head: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPosteriorNet {
    pub core: BoundCore,
    pub head: BoundLinear,
}

impl PosteriorNet {
    pub fn register<R: Rng + ?Sized>(params: &mut ParameterSet, a: &ArchConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            core: RecurrentCore::register(params, "posterior", a, rng)?,
            head: Linear::register(params, "posterior.head", a.hidden, a.n_phases, rng)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParameterSet) -> Result<BoundPosteriorNet> {
        Ok(BoundPosteriorNet { core: self.core.bind(tape, params)?, head: self.head.bind(tape, params)? })
    }
}

impl BoundPosteriorNet {
    /// Returns `(log q, h')`; `input` has the same layout as the agent input.
    pub fn forward(&self, tape: &mut Tape, input: NodeId, h: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.core.step(tape, input, h)?;
        let logits = self.head.forward(tape, h)?;
        Ok((tape.log_softmax(logits)?, h))
    }
}

/// Two-layer linear-then-ELU-then-linear hypernetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hyper2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Hyper2 {
    fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            l1: Linear::register(params, &format!("{name}.0"), input, hidden, rng)?,
            l2: Linear::register(params, &format!("{name}.1"), hidden, output, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: NodeId) -> Result<NodeId> {
        let a = self.l1.bind(tape, params)?.forward(tape, x)?;
        let a = tape.elu(a)?;
        self.l2.bind(tape, params)?.forward(tape, a)
    }
}

/// State-conditioned monotonic mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mixer {
    pub hyper_w1: Hyper2,
    pub hyper_b1: Linear,
    pub hyper_w2: Hyper2,
    pub value: Hyper2,
    pub n_agents: usize,
    pub embed: usize,
}

/// Mixing weights after the absolute-value map.
#[derive(Debug, Clone, Copy)]
pub struct MixerWeights {
    /// `[rows, n_agents * embed]`.
    pub w1: NodeId,
    pub b1: NodeId,
    /// `[rows, embed]`.
    pub w2: NodeId,
    pub v: NodeId,
}

impl Mixer {
    pub fn register<R: Rng + ?Sized>(params: &mut ParameterSet, a: &ArchConfig, rng: &mut R) -> Result<Self> {
        let s = a.state_dim();
        Ok(Self {
            hyper_w1: Hyper2::register(params, "mixer.hyper_w1", s, a.hyper_hidden, a.n_agents * a.mixer_embed, rng)?,
            hyper_b1: Linear::register(params, "mixer.hyper_b1", s, a.mixer_embed, rng)?,
            hyper_w2: Hyper2::register(params, "mixer.hyper_w2", s, a.hyper_hidden, a.mixer_embed, rng)?,
            value: Hyper2::register(params, "mixer.value", s, a.mixer_embed, 1, rng)?,
            n_agents: a.n_agents,
            embed: a.mixer_embed,
        })
    }

    pub fn weights(&self, tape: &mut Tape, params: &ParameterSet, state: NodeId) -> Result<MixerWeights> {
        let w1 = self.hyper_w1.forward(tape, params, state)?;
        let w1 = tape.abs(w1)?;
        let b1 = self.hyper_b1.bind(tape, params)?.forward(tape, state)?;
        let w2 = self.hyper_w2.forward(tape, params, state)?;
        let w2 = tape.abs(w2)?;
        let v = self.value.forward(tape, params, state)?;
        Ok(MixerWeights { w1, b1, w2, v })
    }

    /// `qs: [rows, n_agents]`, `state: [rows, state_dim]` → `Q_total: [rows, 1]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, qs: NodeId, state: NodeId) -> Result<NodeId> {
        if tape.value(qs).cols() != self.n_agents {
            return Err(shape_err(
                "mixer",
                format!("expected {} utilities per row, got {:?}", self.n_agents, tape.value(qs).shape()),
            ));
        }
        let w = self.weights(tape, params, state)?;
        let hidden = tape.row_matmul(qs, w.w1, self.embed)?;
        let hidden = tape.add(hidden, w.b1)?;
        let hidden = tape.elu(hidden)?;
        let out = tape.row_matmul(hidden, w.w2, 1)?;
        tape.add(out, w.v)
    }
}

/// Every network of the architecture, registered in one parameter set
/// under the `agent.`, `comm.`, `posterior.` and `mixer.` prefixes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Networks {
    pub arch: ArchConfig,
    pub agent: AgentNet,
    pub comm: CommNet,
    pub posterior: PosteriorNet,
    pub mixer: Mixer,
}

impl Networks {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<(Self, ParameterSet)> {
        let mut params = ParameterSet::new();
        let agent = AgentNet::register(&mut params, &arch, rng)?;
        let comm = CommNet::register(&mut params, &arch, rng)?;
        let posterior = PosteriorNet::register(&mut params, &arch, rng)?;
        let mixer = Mixer::register(&mut params, &arch, rng)?;
        Ok((Self { arch, agent, comm, posterior, mixer }, params))
    }
}

/// One-hot row of width `n` (all zeros for `None`).
pub fn one_hot(index: Option<usize>, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if let Some(i) = index {
        v[i] = 1.0;
    }
    v
}

/// Builds the `[obs | prev action | inbox]` rows on the tape as a constant.
pub fn input_rows(tape: &mut Tape, a: &ArchConfig, rows: &[(&[f64], Option<usize>, &[f64])]) -> Result<NodeId> {
    let width = a.input_dim();
    let mut data = Vec::with_capacity(rows.len() * width);
    for (obs, prev, inbox) in rows {
        if obs.len() != a.obs_dim || inbox.len() != a.inbox_dim() {
            return Err(shape_err(
                "agent input",
                format!("obs {} (want {}), inbox {} (want {})", obs.len(), a.obs_dim, inbox.len(), a.inbox_dim()),
            ));
        }
        data.extend_from_slice(obs);
        data.extend_from_slice(&one_hot(*prev, a.n_phases));
        data.extend_from_slice(inbox);
    }
    tape.constant(Tensor::new(vec![rows.len(), width], data)?)
}

/// ε-greedy choice over the allowed phases; greedy ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R, mask: &[bool]) -> Result<usize> {
    if mask.len() != q.len() {
        return Err(shape_err("select_action", format!("{} values, {} mask entries", q.len(), mask.len())));
    }
    let allowed: Vec<usize> = (0..q.len()).filter(|&k| mask[k]).collect();
    if allowed.is_empty() {
        return Err(Error::InvalidArgument("action mask allows nothing".into()));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(allowed[rng.random_range(0..allowed.len())]);
    }
    Ok(greedy(q, &allowed))
}

fn greedy(q: &[f64], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &k in allowed {
        if q[k] > q[best] {
            best = k;
        }
    }
    best
}

/// Greedy action over all entries (lowest index on ties).
pub fn argmax(q: &[f64]) -> usize {
    let all: Vec<usize> = (0..q.len()).collect();
    greedy(q, &all)
}
