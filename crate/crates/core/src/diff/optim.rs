use alloc::vec::Vec;

use crate::math;
use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::Result;

/// RMSProp hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub smoothing: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, smoothing: 0.99, epsilon: 1e-5, grad_clip: 10.0 }
    }
}

/// RMSProp with global-norm gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    square_avg: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &ParameterSet) -> Self {
        let square_avg = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Self { config, square_avg }
    }

    pub fn state(&self) -> &[Tensor] {
        &self.square_avg
    }

    pub fn restore_state(&mut self, state: Vec<Tensor>) -> Result<()> {
        if state.len() != self.square_avg.len()
            || state.iter().zip(&self.square_avg).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(crate::error::Error::InvalidArgument("optimizer state shape mismatch".into()));
        }
        self.square_avg = state;
        Ok(())
    }

    /// Applies one update from the accumulated gradients and returns the
    /// pre-clip gradient norm. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParameterSet) -> f64 {
        let norm = params.grad_norm();
        let c = self.config;
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        let ids: Vec<_> = params.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let grad = params.grad(id).data().to_vec();
            let sq = self.square_avg[slot].data_mut();
            let value = params.value_mut(id).data_mut();
            for ((p, s), g) in value.iter_mut().zip(sq.iter_mut()).zip(grad) {
                let g = g * clip;
                *s = c.smoothing * *s + (1.0 - c.smoothing) * g * g;
                *p -= c.learning_rate * g / (math::sqrt(*s) + c.epsilon);
            }
        }
        norm
    }
}
