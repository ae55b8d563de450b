use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("node {0} is not on the tape")]
    UnknownNode(usize),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid phase {phase} for intersection {intersection} ({phases} phases)")]
    InvalidPhase {
        intersection: usize,
        phase: usize,
        phases: usize,
    },
    #[error("duplicate inbox slot {0}")]
    DuplicateSlot(usize),
    #[error("replay buffer holds {have} episodes, {need} required")]
    InsufficientBuffer { have: usize, need: usize },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("incomplete event log: {0}")]
    IncompleteLog(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
