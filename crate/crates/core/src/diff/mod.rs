//! Minimal reverse-mode differentiation: tensors, the tape, parameters,
//! recurrent cells, the optimizer and a finite-difference oracle.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, param_gradient_check, relative_error, ParamCheckReport};
pub use nn::{gru_cell, BoundGru, BoundLinear, GruCell, Linear};
pub use optim::{RmsProp, RmsPropConfig};
pub use params::{ParamId, ParameterSet};
pub use tape::{Gradients, NodeId, Op, Tape, GATHER_ZERO};
pub use tensor::Tensor;
