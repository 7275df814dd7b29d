//! Numeric substrate: dense matrices and the differentiation tape.

pub mod matrix;
pub mod tape;

pub use matrix::{
    sigmoid, softmax_rows, softplus, std_normal_cdf, std_normal_pdf, stream_rng, Matrix,
};
pub use tape::{Gradients, NodeId, Tape};
