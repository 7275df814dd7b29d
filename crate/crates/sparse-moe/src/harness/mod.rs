//! A small language-model harness: synthetic or file corpora, a
//! fixed-window encoder feeding the expert layer, a training loop with
//! metrics, and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod model;
pub mod train;

pub use config::{CorpusSource, GatingMode, ToyLmConfig};
pub use corpus::{Batch, Corpus};
pub use model::{ModelParams, Phase};
pub use train::{evaluate, evaluate_checkpoint, train, TrainArtifacts};
