//! Core of a decentralized multi-agent Q-learning stack with learned,
//! per-recipient, per-bit gated messages, trained on a deterministic
//! point-queue traffic-signal environment.
//!
//! The crate is `no_std` (it needs `alloc`) so that every algorithm can be
//! reused without an operating system; file formats, checkpoints and the
//! command line live in the `gatecomm` companion crate.

#![no_std]
extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod checks;
pub mod comm;
pub mod diff;
pub mod error;
pub mod eval;
pub mod nets;
pub(crate) mod math;
pub mod traffic;
pub mod train;

pub use error::{Error, Result};
