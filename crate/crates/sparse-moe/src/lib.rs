//! Sparsely-gated mixture-of-experts.
//!
//! A conditional-computation layer: a trainable gating network picks a small
//! subset of expert networks per input and mixes their outputs by the gate
//! values, so parameter count scales with the number of experts while
//! per-example compute stays near-constant. The crate provides the gating
//! functions and their balance losses, hierarchical and batchwise variants,
//! a memory-factored Adam optimizer, a small language-model training harness,
//! and a cost model for placing experts across a cluster.

pub mod attention;
pub mod balance;
pub mod batchwise;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod harness;
pub mod hierarchical;
pub mod kernel;
pub mod moe;
pub mod optim;
pub mod sim;

pub use error::{Error, Result};
pub use kernel::{Matrix, Tape};
