//! Token streams for the harness: a synthetic mixture of sub-languages and
//! a plain-text file loader.
//!
//! The synthetic stream interleaves runs from `modes` latent sub-languages
//! in two flavors. In the sliced flavor each mode owns a contiguous slice
//! of the vocabulary and its own random bigram table over that slice, so
//! next-token statistics differ sharply by mode and a router has something
//! real to specialize on. In the shared flavor all modes draw content
//! successors from one shared pool, so their bigram tables conflict on the
//! same preceding token and a single unconditional table cannot fit them;
//! each mode also emits its own small set of frequent marker tokens, which
//! makes the active mode linearly detectable from a context window. Mode
//! switches every hundred-odd tokens, long enough for context windows to
//! sit inside one mode most of the time.

use crate::error::{Error, Result};
use crate::harness::config::CorpusSource;
use crate::kernel::stream_rng;
use rand::Rng;
use std::path::Path;

/// RNG stream purposes, kept distinct so draws never alias across uses.
pub(crate) mod purpose {
    pub const CORPUS: u64 = 11;
    pub const BATCH: u64 = 12;
    pub const DROPOUT: u64 = 13;
    pub const GATE_NOISE: u64 = 14;
    pub const INIT: u64 = 15;
}

/// Candidate next tokens per (mode, previous token) and their weights.
const BIGRAM_FANOUT: usize = 4;
const BIGRAM_WEIGHTS: [f64; BIGRAM_FANOUT] = [0.5, 0.25, 0.15, 0.1];

/// Marker tokens per mode in the shared-vocabulary flavor.
const MARKERS_PER_MODE: usize = 4;

/// Smallest vocabulary the shared flavor supports: marker sets plus a
/// content pool at least as large as all marker sets together.
pub(crate) fn shared_vocab_min(modes: usize) -> usize {
    2 * modes * MARKERS_PER_MODE
}

/// Token stream split into disjoint train and eval segments.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub vocab_size: usize,
}

/// One training or evaluation batch: row-major context windows and the
/// token each window predicts.
#[derive(Debug, Clone)]
pub struct Batch {
    /// batch_size * context_len ids, window after window.
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    pub context_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn synthetic_stream(
    modes: usize,
    vocab: usize,
    shared_vocab: bool,
    seed: u64,
    total: usize,
) -> Vec<usize> {
    let mut rng = stream_rng(seed, purpose::CORPUS, 0);
    // bigram[m][t] lists candidate successors of t while mode m is active.
    let bigram: Vec<Vec<[usize; BIGRAM_FANOUT]>> = if shared_vocab {
        // Slot 0 is a marker owned by mode m; the rest come from the pool
        // every mode shares, so the tables disagree row by row.
        let pool_lo = modes * MARKERS_PER_MODE;
        (0..modes)
            .map(|m| {
                let mark_lo = m * MARKERS_PER_MODE;
                (0..vocab)
                    .map(|_| {
                        std::array::from_fn(|slot| {
                            if slot == 0 {
                                mark_lo + rng.gen_range(0..MARKERS_PER_MODE)
                            } else {
                                pool_lo + rng.gen_range(0..vocab - pool_lo)
                            }
                        })
                    })
                    .collect()
            })
            .collect()
    } else {
        (0..modes)
            .map(|m| {
                let span = vocab / modes;
                let lo = m * span;
                (0..vocab)
                    .map(|_| std::array::from_fn(|_| lo + rng.gen_range(0..span)))
                    .collect()
            })
            .collect()
    };
    let mut out = Vec::with_capacity(total);
    let mut mode = 0;
    let mut run_left = 0usize;
    let mut prev = rng.gen_range(0..vocab);
    for _ in 0..total {
        if run_left == 0 {
            mode = rng.gen_range(0..modes);
            run_left = 96 + rng.gen_range(0..64);
        }
        run_left -= 1;
        let mut u: f64 = rng.gen();
        let mut pick = BIGRAM_FANOUT - 1;
        for (i, w) in BIGRAM_WEIGHTS.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let next = bigram[mode][prev][pick];
        out.push(next);
        prev = next;
    }
    out
}

/// Deterministic word hash, stable across platforms and releases.
fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn file_stream(path: &Path, vocab: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("read {}: {e}", path.display())))?;
    let tokens: Vec<usize> = text
        .split_whitespace()
        .map(|w| (fnv1a(w) % vocab as u64) as usize)
        .collect();
    if tokens.is_empty() {
        return Err(Error::Corpus(format!("{} holds no tokens", path.display())));
    }
    Ok(tokens)
}

impl Corpus {
    /// Build the train/eval splits. Synthetic sources generate exactly
    /// `train_tokens + eval_tokens` and split by position; file sources
    /// keep the last tenth for eval.
    pub fn load(
        source: &CorpusSource,
        vocab_size: usize,
        seed: u64,
        train_tokens: usize,
        eval_tokens: usize,
    ) -> Result<Corpus> {
        let (train, eval) = match source {
            CorpusSource::Synthetic {
                synthetic_modes,
                shared_vocab,
                ..
            } => {
                if *synthetic_modes == 0 || vocab_size / *synthetic_modes < 2 {
                    return Err(Error::Corpus(format!(
                        "synthetic corpus needs at least 2 vocabulary entries per mode, got {synthetic_modes} modes over {vocab_size}"
                    )));
                }
                if *shared_vocab && vocab_size < shared_vocab_min(*synthetic_modes) {
                    return Err(Error::Corpus(format!(
                        "shared-vocabulary corpus with {synthetic_modes} modes needs at least {} tokens, got {vocab_size}",
                        shared_vocab_min(*synthetic_modes)
                    )));
                }
                let mut all = synthetic_stream(
                    *synthetic_modes,
                    vocab_size,
                    *shared_vocab,
                    seed,
                    train_tokens + eval_tokens,
                );
                let eval = all.split_off(train_tokens);
                (all, eval)
            }
            CorpusSource::File { file } => {
                let mut all = file_stream(file, vocab_size)?;
                let cut = all.len() - all.len() / 10;
                let eval = all.split_off(cut);
                (all, eval)
            }
        };
        if eval.is_empty() || train.is_empty() {
            return Err(Error::Corpus("a split came out empty".into()));
        }
        Ok(Corpus {
            train,
            eval,
            vocab_size,
        })
    }

    fn windows_from(tokens: &[usize], context_len: usize, positions: impl Iterator<Item = usize>) -> Batch {
        let mut ids = Vec::new();
        let mut targets = Vec::new();
        for p in positions {
            ids.extend_from_slice(&tokens[p - context_len..p]);
            targets.push(tokens[p]);
        }
        Batch {
            ids,
            targets,
            context_len,
        }
    }

    /// Positions drawn independently per step from a replayable stream.
    pub fn train_batch(
        &self,
        context_len: usize,
        batch_size: usize,
        seed: u64,
        step: u64,
    ) -> Result<Batch> {
        if self.train.len() <= context_len {
            return Err(Error::Corpus(format!(
                "train split of {} tokens cannot fill {context_len}-token contexts",
                self.train.len()
            )));
        }
        let mut rng = stream_rng(seed, purpose::BATCH, step);
        let range = self.train.len() - context_len;
        let positions = (0..batch_size).map(move |_| context_len + rng.gen_range(0..range));
        Ok(Self::windows_from(&self.train, context_len, positions))
    }

    /// Deterministic sequential windows from the eval split; batch `index`
    /// continues where the previous one stopped, wrapping if the split is
    /// short.
    pub fn eval_batch(&self, context_len: usize, batch_size: usize, index: usize) -> Result<Batch> {
        if self.eval.len() <= context_len {
            return Err(Error::Corpus(format!(
                "eval split of {} tokens cannot fill {context_len}-token contexts",
                self.eval.len()
            )));
        }
        let range = self.eval.len() - context_len;
        let positions = (0..batch_size).map(move |i| context_len + (index * batch_size + i) % range);
        Ok(Self::windows_from(&self.eval, context_len, positions))
    }
}
