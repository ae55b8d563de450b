//! Message sampling, per-recipient gating and the variational communication loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{NodeId, Tape, Tensor, GATHER_ZERO};
use crate::error::{shape_err, Error, Result};
use crate::math;

#[cfg(test)]
mod tests;

/// Relaxation temperature of the gate distribution.
pub const GATE_TEMPERATURE: f64 = 0.67;
/// Default weight of both KL penalties.
pub const DEFAULT_BETA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Stochastic,
    Mean,
}

/// Standard-normal noise for one message.
pub fn message_noise<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// `mu + exp(logvar / 2) ⊙ eps`.
pub fn sample_message_with(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(shape_err("sample_message", format!("{} / {} / {}", mu.len(), logvar.len(), eps.len())));
    }
    Ok(mu.iter().zip(logvar).zip(eps).map(|((m, lv), e)| m + math::exp(0.5 * lv) * e).collect())
}

pub fn sample_message<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], rng: &mut R, mode: SampleMode) -> Result<Vec<f64>> {
    match mode {
        SampleMode::Mean => {
            if mu.len() != logvar.len() {
                return Err(shape_err("sample_message", format!("{} / {}", mu.len(), logvar.len())));
            }
            Ok(mu.to_vec())
        }
        SampleMode::Stochastic => {
            let eps = message_noise(rng, mu.len());
            sample_message_with(mu, logvar, &eps)
        }
    }
}

/// `log U - log(1 - U)`: the difference of two standard Gumbel variables.
pub fn logistic_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return math::ln(u) - math::ln_1p(-u);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// Relaxed gate for a given logistic noise sample.
pub fn gumbel_sigmoid_with(logit: f64, lambda: f64, noise: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {lambda}")));
    }
    Ok(sigmoid((logit + noise) / lambda))
}

pub fn gumbel_sigmoid<R: Rng + ?Sized>(logit: f64, lambda: f64, rng: &mut R) -> Result<f64> {
    gumbel_sigmoid_with(logit, lambda, logistic_noise(rng))
}

/// Execution-time send decision.
pub fn hard_gate(c: f64) -> u8 {
    u8::from(c > 0.5)
}

/// `m ⊙ c`.
pub fn gate(m: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    if m.len() != c.len() {
        return Err(shape_err("gate", format!("message {} vs gate {}", m.len(), c.len())));
    }
    Ok(m.iter().zip(c).map(|(a, b)| a * b).collect())
}

/// Lays gated messages out by neighbour slot, zero-filling empty slots.
pub fn assemble_inbox(packets: &[(usize, &[f64])], slots: usize, message_len: usize) -> Result<Vec<f64>> {
    let mut inbox = vec![0.0; slots * message_len];
    let mut used = vec![false; slots];
    for (slot, m) in packets {
        if *slot >= slots {
            return Err(Error::InvalidArgument(format!("slot {slot} out of {slots}")));
        }
        if used[*slot] {
            return Err(Error::DuplicateSlot(*slot));
        }
        if m.len() != message_len {
            return Err(shape_err("assemble_inbox", format!("message of length {}", m.len())));
        }
        used[*slot] = true;
        inbox[slot * message_len..(slot + 1) * message_len].copy_from_slice(m);
    }
    Ok(inbox)
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter().zip(logvar).map(|(m, lv)| 0.5 * (math::exp(*lv) + m * m - 1.0 - lv)).sum()
}

/// `KL(Bernoulli(p) || Bernoulli(prior))` with `0 log 0 = 0`.
pub fn bernoulli_kl(p: f64, prior: f64) -> Result<f64> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidArgument(format!("prior must lie in (0, 1), got {prior}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability must lie in [0, 1], got {p}")));
    }
    let term = |x: f64, y: f64| if x == 0.0 { 0.0 } else { x * math::ln(x / y) };
    Ok(term(p, prior) + term(1.0 - p, 1.0 - prior))
}

/// Bernoulli KL against `Bernoulli(1/2)` for `p = sigmoid(logit)`, stable for large logits.
pub fn bernoulli_kl_logit(logit: f64) -> f64 {
    let p = sigmoid(logit);
    p * log_sigmoid(logit) + (1.0 - p) * log_sigmoid(-logit) + core::f64::consts::LN_2
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - math::ln_1p(math::exp(-x.abs()))
}

// Tape versions.

/// Reparameterised sample `mu + exp(logvar / 2) ⊙ eps` with constant `eps`.
pub fn tape_sample_message(tape: &mut Tape, mu: NodeId, logvar: NodeId, eps: NodeId) -> Result<NodeId> {
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(mu, noise)
}

/// `sigmoid((logits + noise) / lambda)` with constant logistic `noise`.
pub fn tape_gumbel_sigmoid(tape: &mut Tape, logits: NodeId, noise: NodeId, lambda: f64) -> Result<NodeId> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {lambda}")));
    }
    let x = tape.add(logits, noise)?;
    let x = tape.scale(x, 1.0 / lambda)?;
    tape.sigmoid(x)
}

/// Row-wise Gaussian KL against the standard normal: `[rows, k]` → `[rows, 1]`.
pub fn tape_gaussian_kl(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let var = tape.exp(logvar)?;
    let mu2 = tape.mul(mu, mu)?;
    let s = tape.add(var, mu2)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.scale_shift(s, 0.5, -0.5)?;
    tape.row_sum(s)
}

/// Row-wise Bernoulli KL against `Bernoulli(1/2)`, summed over bits: `[rows, k]` → `[rows, 1]`.
pub fn tape_bernoulli_kl(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let p = tape.sigmoid(logits)?;
    let lp = tape.log_sigmoid(logits)?;
    let neg = tape.scale(logits, -1.0)?;
    let lq = tape.log_sigmoid(neg)?;
    let q = tape.scale_shift(p, -1.0, 1.0)?;
    let a = tape.mul(p, lp)?;
    let b = tape.mul(q, lq)?;
    let s = tape.add(a, b)?;
    let s = tape.scale_shift(s, 1.0, core::f64::consts::LN_2)?;
    tape.row_sum(s)
}

/// Selects whole rows of a 2-D node (`None` yields a zero row).
pub fn gather_rows(tape: &mut Tape, a: NodeId, rows: &[Option<usize>]) -> Result<NodeId> {
    let c = tape.value(a).cols();
    let mut index = Vec::with_capacity(rows.len() * c);
    for r in rows {
        match r {
            Some(r) => index.extend((0..c).map(|k| (r * c + k) as u32)),
            None => index.extend(core::iter::repeat(GATHER_ZERO).take(c)),
        }
    }
    tape.gather(a, index, &[rows.len(), c])
}

/// Weights of the communication objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommLossConfig {
    pub beta_m: f64,
    pub beta_c: f64,
    /// Treat the recipient policy as a fixed target.
    pub stop_gradient_policy: bool,
}

impl Default for CommLossConfig {
    fn default() -> Self {
        Self { beta_m: DEFAULT_BETA, beta_c: DEFAULT_BETA, stop_gradient_policy: false }
    }
}

/// Scalar nodes of the communication objective.
#[derive(Debug, Clone, Copy)]
pub struct CommLossNodes {
    pub ce: NodeId,
    pub kl_message: NodeId,
    pub kl_gate: NodeId,
    pub total: NodeId,
}

/// Values of the communication objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommLossTerms {
    pub ce_term: f64,
    pub kl_message: f64,
    pub kl_gate: f64,
    pub beta_m: f64,
    pub beta_c: f64,
}

impl CommLossTerms {
    pub fn total(&self) -> f64 {
        self.ce_term + self.beta_m * self.kl_message + self.beta_c * self.kl_gate
    }

    pub fn read(tape: &Tape, nodes: &CommLossNodes, config: &CommLossConfig) -> Self {
        Self {
            ce_term: tape.value(nodes.ce).item(),
            kl_message: tape.value(nodes.kl_message).item(),
            kl_gate: tape.value(nodes.kl_gate).item(),
            beta_m: config.beta_m,
            beta_c: config.beta_c,
        }
    }
}

/// Communication loss over a set of recipient rows and active (sender, recipient) pairs.
///
/// * `q_values`, `log_posterior`: `[rows, phases]`, one row per recipient step; the
///   policy is `softmax(q_values)` and the cross-entropy is averaged over rows.
/// * `pair_mu`, `pair_logvar`, `pair_gate_logits`: one row per active pair, or
///   `None` when no pair is active (both KL means are then 0).
pub fn communication_loss(
    tape: &mut Tape,
    q_values: NodeId,
    log_posterior: NodeId,
    pairs: Option<(NodeId, NodeId, NodeId)>,
    config: &CommLossConfig,
) -> Result<CommLossNodes> {
    let policy_logits = if config.stop_gradient_policy { tape.detach(q_values)? } else { q_values };
    let pi = tape.softmax(policy_logits)?;
    let plq = tape.mul(pi, log_posterior)?;
    let rows = tape.row_sum(plq)?;
    let ce = tape.mean(rows)?;
    let ce = tape.scale(ce, -1.0)?;
    let (kl_message, kl_gate) = match pairs {
        Some((mu, logvar, logits)) => {
            let km = tape_gaussian_kl(tape, mu, logvar)?;
            let km = tape.mean(km)?;
            let kc = tape_bernoulli_kl(tape, logits)?;
            let kc = tape.mean(kc)?;
            (km, kc)
        }
        None => {
            let z = tape.constant(Tensor::scalar(0.0))?;
            (z, z)
        }
    };
    let wm = tape.scale(kl_message, config.beta_m)?;
    let wc = tape.scale(kl_gate, config.beta_c)?;
    let total = tape.add(ce, wm)?;
    let total = tape.add(total, wc)?;
    Ok(CommLossNodes { ce, kl_message, kl_gate, total })
}

/// How gates are produced when messages are exchanged.
///
/// Serialised as its label: `learned`, `full`, `none` or `random(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "alloc::string::String", into = "alloc::string::String")]
pub enum CommMode {
    /// Gates from the communication network.
    Learned,
    /// Every bit to every neighbour is sent.
    Full,
    /// Nothing is sent; inboxes stay zero.
    None,
    /// Each bit is sent independently with probability `p`.
    Random(f64),
}

impl CommMode {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown communication mode {s:?}"));
        match s {
            "learned" => Ok(Self::Learned),
            "full" => Ok(Self::Full),
            "none" => Ok(Self::None),
            _ => {
                let p = s
                    .strip_prefix("random(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("random:"))
                    .ok_or_else(bad)?;
                let p: f64 = p.trim().parse().map_err(|_| bad())?;
                Self::Random(p).validated()
            }
        }
    }

    pub fn validated(self) -> Result<Self> {
        if let Self::Random(p) = self {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("random gate probability {p} outside [0, 1]")));
            }
        }
        Ok(self)
    }

    pub fn label(&self) -> alloc::string::String {
        match self {
            Self::Learned => "learned".into(),
            Self::Full => "full".into(),
            Self::None => "none".into(),
            Self::Random(p) => format!("random({p})"),
        }
    }
}

impl TryFrom<alloc::string::String> for CommMode {
    type Error = Error;

    fn try_from(s: alloc::string::String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<CommMode> for alloc::string::String {
    fn from(m: CommMode) -> Self {
        m.label()
    }
}
