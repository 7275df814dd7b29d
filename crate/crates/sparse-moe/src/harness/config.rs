//! Run configuration for the toy language-model harness.

use crate::error::{Error, Result};
use crate::optim::FactoredMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// How examples are routed to experts during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// Per-example noisy top-k selection; balance via importance and load
    /// losses.
    NoisyTopk,
    /// Per-batch top-m mask per expert column during training, learned
    /// per-expert thresholds at evaluation time.
    Batchwise,
}

impl Default for GatingMode {
    fn default() -> Self {
        GatingMode::NoisyTopk
    }
}

fn default_false() -> bool {
    false
}

/// Where tokens come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum CorpusSource {
    /// Built-in generator: a mixture of sub-languages. With
    /// `shared_vocab = false` each mode owns a vocabulary slice; with
    /// `shared_vocab = true` all modes draw successors from one shared
    /// content pool, so their bigram tables conflict and only
    /// mode-conditional computation can fit them all.
    Synthetic {
        synthetic_modes: usize,
        #[serde(default = "default_false")]
        shared_vocab: bool,
        /// Generate the stream from this seed instead of the run seed, so
        /// several training seeds can share one fixed task.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corpus_seed: Option<u64>,
    },
    /// Whitespace-tokenized text file, words hashed into the vocabulary.
    File { file: PathBuf },
}

impl CorpusSource {
    /// Seed the token stream is generated from for a run seeded with
    /// `run_seed`.
    pub fn stream_seed(&self, run_seed: u64) -> u64 {
        match self {
            CorpusSource::Synthetic {
                corpus_seed: Some(s),
                ..
            } => *s,
            _ => run_seed,
        }
    }
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic {
            synthetic_modes: 4,
            shared_vocab: false,
            corpus_seed: None,
        }
    }
}

fn default_w() -> f64 {
    0.1
}
fn default_base_lr() -> f64 {
    0.01
}
fn default_warmup() -> u64 {
    100
}
fn default_train_tokens() -> usize {
    100_000
}
fn default_eval_tokens() -> usize {
    10_000
}
fn default_eval_batches() -> usize {
    4
}
fn default_metrics_every() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    /// Tokens of left context the model conditions on.
    pub context_len: usize,
    /// Width of the residual stream; also the embedding and expert I/O width.
    pub model_dim: usize,
    pub n_experts: usize,
    /// Experts consulted per example.
    pub k: usize,
    pub expert_hidden: usize,
    #[serde(default)]
    pub gating_mode: GatingMode,
    #[serde(default = "default_w")]
    pub w_importance: f64,
    #[serde(default = "default_w")]
    pub w_load: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dropout_prob: f64,
    /// Drop expert hidden activations after the forward pass and recompute
    /// them during backward; trades compute for memory, numerically inert.
    #[serde(default)]
    pub recompute_expert_activations: bool,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default)]
    pub factored_adam: FactoredMode,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default = "default_train_tokens")]
    pub train_tokens: usize,
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
    /// Batches of the eval split averaged into each reported perplexity.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_metrics_every")]
    pub metrics_every: usize,
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("model_dim", self.model_dim),
            ("n_experts", self.n_experts),
            ("k", self.k),
            ("expert_hidden", self.expert_hidden),
            ("batch_size", self.batch_size),
            ("steps", self.steps),
            ("eval_batches", self.eval_batches),
            ("metrics_every", self.metrics_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.k > self.n_experts {
            return Err(Error::Config(format!(
                "k = {} exceeds n_experts = {}",
                self.k, self.n_experts
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        if self.gating_mode == GatingMode::Batchwise && self.batch_size % self.n_experts != 0 {
            return Err(Error::Config(format!(
                "batchwise gating needs batch_size divisible by n_experts, got {} and {}",
                self.batch_size, self.n_experts
            )));
        }
        if !(self.base_lr > 0.0) || self.warmup_steps == 0 {
            return Err(Error::Config(
                "base_lr must be positive and warmup_steps nonzero".into(),
            ));
        }
        if let CorpusSource::Synthetic {
            synthetic_modes,
            shared_vocab,
            ..
        } = self.corpus
        {
            if synthetic_modes == 0 || self.vocab_size / synthetic_modes < 2 {
                return Err(Error::Config(format!(
                    "synthetic corpus needs at least 2 vocabulary entries per mode, got {} modes over {} tokens",
                    synthetic_modes, self.vocab_size
                )));
            }
            if shared_vocab && self.vocab_size < crate::harness::corpus::shared_vocab_min(synthetic_modes) {
                return Err(Error::Config(format!(
                    "shared-vocabulary corpus with {} modes needs at least {} tokens, got {}",
                    synthetic_modes,
                    crate::harness::corpus::shared_vocab_min(synthetic_modes),
                    self.vocab_size
                )));
            }
            if self.train_tokens <= self.context_len || self.eval_tokens <= self.context_len {
                return Err(Error::Config(
                    "train_tokens and eval_tokens must exceed context_len".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ToyLmConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }
}
