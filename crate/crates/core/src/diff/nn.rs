use alloc::format;

use rand::Rng;

use super::params::{ParamId, ParameterSet};
use super::tape::{NodeId, Tape};
use crate::error::Result;

/// Affine layer `x · W + b` with `W: [input, output]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

/// A [`Linear`] whose parameters have been placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = params.insert_uniform(&format!("{name}.weight"), &[input, output], input, rng)?;
        let b = params.insert_uniform(&format!("{name}.bias"), &[output], input, rng)?;
        Ok(Self { w, b, input, output })
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParameterSet) -> Result<BoundLinear> {
        Ok(BoundLinear { w: tape.param(params, self.w)?, b: tape.param(params, self.b)? })
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.affine(x, self.w, self.b)
    }
}

/// Gated recurrent unit with fused `[r | z | n]` gate matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub input_map: Linear,
    pub hidden_map: Linear,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    pub input_map: BoundLinear,
    pub hidden_map: BoundLinear,
    pub hidden: usize,
}

impl GruCell {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input_map = Linear::register(params, &format!("{name}.ih"), input, 3 * hidden, rng)?;
        let hidden_map = Linear::register(params, &format!("{name}.hh"), hidden, 3 * hidden, rng)?;
        Ok(Self { input_map, hidden_map, hidden })
    }

    pub fn bind(&self, tape: &mut Tape, params: &ParameterSet) -> Result<BoundGru> {
        Ok(BoundGru {
            input_map: self.input_map.bind(tape, params)?,
            hidden_map: self.hidden_map.bind(tape, params)?,
            hidden: self.hidden,
        })
    }
}

impl BoundGru {
    /// One recurrent update; `x: [rows, input]`, `h_prev: [rows, hidden]`.
    pub fn step(&self, tape: &mut Tape, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
        gru_cell(tape, x, h_prev, self)
    }
}

/// `h' = (1 - z) ⊙ n + z ⊙ h` with reset gate `r`, update gate `z` and
/// candidate `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`.
pub fn gru_cell(tape: &mut Tape, x: NodeId, h_prev: NodeId, cell: &BoundGru) -> Result<NodeId> {
    let hd = cell.hidden;
    let gi = cell.input_map.forward(tape, x)?;
    let gh = cell.hidden_map.forward(tape, h_prev)?;
    let gi_rz = tape.slice(gi, 0, 2 * hd)?;
    let gh_rz = tape.slice(gh, 0, 2 * hd)?;
    let rz_pre = tape.add(gi_rz, gh_rz)?;
    let rz = tape.sigmoid(rz_pre)?;
    let r = tape.slice(rz, 0, hd)?;
    let z = tape.slice(rz, hd, hd)?;
    let gi_n = tape.slice(gi, 2 * hd, hd)?;
    let gh_n = tape.slice(gh, 2 * hd, hd)?;
    let gated = tape.mul(r, gh_n)?;
    let n_pre = tape.add(gi_n, gated)?;
    let n = tape.tanh(n_pre)?;
    let diff = tape.sub(h_prev, n)?;
    let keep = tape.mul(z, diff)?;
    tape.add(n, keep)
}
