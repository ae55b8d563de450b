//! Central finite-difference oracle for tape gradients.

use alloc::vec::Vec;


use super::params::{ParamId, ParameterSet};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Error measure used throughout: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar(tape: &Tape, out: NodeId) -> Result<f64> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences with the given step, returning the worst relative error.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let x = tape.variable(point.clone())?;
    let out = f(&mut tape, x)?;
    eval_scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(point.shape());
    let analytic = grads.get(x).unwrap_or(&zero);

    let eval_at = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.variable(p)?;
        let o = f(&mut t, x)?;
        eval_scalar(&t, o)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite difference"));
        }
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Outcome of a parameter-space gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
    /// Largest analytic gradient magnitude among the checked coordinates.
    pub max_abs_gradient: f64,
}

/// Checks gradients of a scalar loss with respect to registered parameters.
///
/// `build` must construct the loss on the supplied tape from the supplied
/// parameter values. `coords` selects the `(parameter, flat index)` pairs to
/// perturb; `None` checks every coordinate.
pub fn param_gradient_check<F>(
    params: &ParameterSet,
    build: F,
    step: f64,
    coords: Option<&[(ParamId, usize)]>,
) -> Result<ParamCheckReport>
where
    F: Fn(&ParameterSet, &mut Tape) -> Result<NodeId>,
{
    let mut work = params.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&work, &mut tape)?;
    eval_scalar(&tape, loss)?;
    tape.backward_into(loss, &mut work)?;
    let analytic = work.clone();

    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params.ids().flat_map(|id| (0..params.value(id).len()).map(move |i| (id, i))).collect();
            &all
        }
    };
    let mut eval = |id: ParamId, i: usize, delta: f64| -> Result<f64> {
        let orig = work.value(id).data()[i];
        work.value_mut(id).data_mut()[i] = orig + delta;
        let mut t = Tape::new();
        let r = build(&work, &mut t).and_then(|o| eval_scalar(&t, o));
        work.value_mut(id).data_mut()[i] = orig;
        r
    };
    let mut report =
        ParamCheckReport { max_relative_error: 0.0, worst: None, coordinates: coords.len(), max_abs_gradient: 0.0 };
    for &(id, i) in coords {
        let numeric = (eval(id, i, step)? - eval(id, i, -step)?) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite difference"));
        }
        let a = analytic.grad(id).data()[i];
        report.max_abs_gradient = report.max_abs_gradient.max(a.abs());
        let e = relative_error(a, numeric);
        if e > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(e);
            report.worst = Some((id, i));
        }
    }
    Ok(report)
}

/// Picks up to `per_param` coordinates from every parameter, spread evenly.
pub fn sample_coordinates(params: &ParameterSet, per_param: usize) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in params.ids() {
        let n = params.value(id).len();
        let k = per_param.min(n).max(1);
        for j in 0..k {
            out.push((id, j * n / k));
        }
    }
    out
}
