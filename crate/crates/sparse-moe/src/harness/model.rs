//! The toy language model: embedding, fixed-window feed-forward context
//! encoder, a sparse expert layer wrapped in dropout and a residual
//! connection, and a softmax readout.
//!
//! The expert layer's input and output width both equal `model_dim` so the
//! residual add is well-typed. Its combined output passes through a sigmoid
//! before dropout. Dropout is the inverted kind: activations are zeroed
//! with probability p, survivors divided by 1 - p, and the whole thing
//! disappears at evaluation time.

use crate::batchwise::{moe_forward_batchwise, moe_forward_threshold, BatchwiseOutput};
use crate::error::{Error, Result};
use crate::gating::{GateNoise, GateResult};
use crate::harness::config::{GatingMode, ToyLmConfig};
use crate::harness::corpus::{purpose, Batch};
use crate::kernel::{stream_rng, Matrix, NodeId, Tape};
use crate::moe::{moe_forward, MoeNodes, MoeParams};
use rand_chacha::ChaCha8Rng;

/// All trainable weights plus, in batchwise mode, the per-expert gate
/// thresholds (trained by their own rule, not by the optimizer).
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// vocab_size x model_dim.
    pub embed: Matrix,
    /// (context_len * model_dim) x model_dim.
    pub w_enc: Matrix,
    pub moe: MoeParams,
    /// model_dim x vocab_size.
    pub w_out: Matrix,
    /// Per-expert gate thresholds; empty unless gating_mode is batchwise.
    pub thresholds: Vec<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform(rows, cols, limit, rng)
}

impl ModelParams {
    pub fn init(cfg: &ToyLmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, purpose::INIT, 0);
        let embed = glorot(cfg.vocab_size, cfg.model_dim, &mut rng);
        let w_enc = glorot(cfg.context_len * cfg.model_dim, cfg.model_dim, &mut rng);
        let moe = MoeParams::init(
            cfg.model_dim,
            cfg.expert_hidden,
            cfg.model_dim,
            cfg.n_experts,
            true,
            &mut rng,
        );
        let w_out = glorot(cfg.model_dim, cfg.vocab_size, &mut rng);
        let thresholds = match cfg.gating_mode {
            GatingMode::Batchwise => vec![0.0; cfg.n_experts],
            GatingMode::NoisyTopk => Vec::new(),
        };
        Ok(ModelParams {
            embed,
            w_enc,
            moe,
            w_out,
            thresholds,
        })
    }

    /// Optimizer-trained parameters in a stable order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("w_enc".to_string(), &self.w_enc),
            ("w_gate".to_string(), &self.moe.w_gate),
            ("w_noise".to_string(), &self.moe.w_noise),
        ];
        for (i, e) in self.moe.experts.iter().enumerate() {
            out.push((format!("expert{i:02}_w1"), &e.w1));
            out.push((format!("expert{i:02}_w2"), &e.w2));
        }
        out.push(("w_out".to_string(), &self.w_out));
        out
    }

    /// The same parameters as owned values, for the optimizer.
    pub fn collect(&self) -> Vec<Matrix> {
        self.named().into_iter().map(|(_, m)| m.clone()).collect()
    }

    /// Write optimizer-updated values back in `named()` order.
    pub fn restore(&mut self, values: Vec<Matrix>) -> Result<()> {
        let count = self.named().len();
        if values.len() != count {
            return Err(Error::invalid(format!(
                "restore got {} matrices, model has {count}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        self.embed = it.next().unwrap();
        self.w_enc = it.next().unwrap();
        self.moe.w_gate = it.next().unwrap();
        self.moe.w_noise = it.next().unwrap();
        for e in &mut self.moe.experts {
            e.w1 = it.next().unwrap();
            e.w2 = it.next().unwrap();
        }
        self.w_out = it.next().unwrap();
        Ok(())
    }

    /// Rebuild a model from checkpointed (name, matrix) pairs.
    pub fn from_named(cfg: &ToyLmConfig, mut entries: Vec<(String, Matrix)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Matrix> {
            let idx = entries
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            Ok(entries.swap_remove(idx).1)
        };
        let embed = take("embed")?;
        let w_enc = take("w_enc")?;
        let w_gate = take("w_gate")?;
        let w_noise = take("w_noise")?;
        let mut experts = Vec::with_capacity(cfg.n_experts);
        for i in 0..cfg.n_experts {
            experts.push(crate::moe::ExpertParams {
                w1: take(&format!("expert{i:02}_w1"))?,
                w2: take(&format!("expert{i:02}_w2"))?,
            });
        }
        let w_out = take("w_out")?;
        let thresholds = match cfg.gating_mode {
            GatingMode::Batchwise => take("thresholds")?.data().to_vec(),
            GatingMode::NoisyTopk => Vec::new(),
        };
        if let Some((name, _)) = entries.first() {
            return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
        }
        let model = ModelParams {
            embed,
            w_enc,
            moe: MoeParams {
                w_gate,
                w_noise,
                experts,
                sigmoid_output: true,
            },
            w_out,
            thresholds,
        };
        model.check_shapes(cfg)?;
        Ok(model)
    }

    fn check_shapes(&self, cfg: &ToyLmConfig) -> Result<()> {
        let expect = [
            (self.embed.shape(), (cfg.vocab_size, cfg.model_dim), "embed"),
            (
                self.w_enc.shape(),
                (cfg.context_len * cfg.model_dim, cfg.model_dim),
                "w_enc",
            ),
            (self.w_out.shape(), (cfg.model_dim, cfg.vocab_size), "w_out"),
        ];
        for (got, want, name) in expect {
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {got:?}, config implies {want:?}"
                )));
            }
        }
        self.moe.validate()?;
        Ok(())
    }

    /// Parameter and per-token forward-cost breakdown.
    pub fn report(&self, cfg: &ToyLmConfig) -> ParamReport {
        let moe_params: usize = self.moe.experts.iter().map(|e| e.param_count()).sum::<usize>()
            + self.moe.w_gate.len()
            + self.moe.w_noise.len();
        let non_moe = self.embed.len() + self.w_enc.len() + self.w_out.len();
        let d = cfg.model_dim;
        let encoder_ops = cfg.context_len * d * d;
        let gate_ops = d * cfg.n_experts;
        let expert_ops = cfg.k * 2 * d * cfg.expert_hidden;
        let softmax_ops = d * cfg.vocab_size;
        ParamReport {
            moe_params,
            non_moe_params: non_moe,
            total_params: moe_params + non_moe,
            ops_per_token_excl_softmax: encoder_ops + gate_ops + expert_ops,
            ops_per_token_incl_softmax: encoder_ops + gate_ops + expert_ops + softmax_ops,
        }
    }
}

/// Parameter counts and multiply-add costs, rendered into report.txt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamReport {
    pub total_params: usize,
    pub moe_params: usize,
    pub non_moe_params: usize,
    /// Forward multiply-adds per token: encoder + gate + active experts.
    pub ops_per_token_excl_softmax: usize,
    /// The same plus the vocabulary readout.
    pub ops_per_token_incl_softmax: usize,
}

impl ParamReport {
    pub fn render(&self) -> String {
        format!(
            "parameters.total {}\n\
             parameters.moe {}\n\
             parameters.other {}\n\
             ops_per_token.excluding_softmax {}\n\
             ops_per_token.including_softmax {}\n\
             ops convention: one multiply-add = one op; double for flops-style counts\n",
            self.total_params,
            self.moe_params,
            self.non_moe_params,
            self.ops_per_token_excl_softmax,
            self.ops_per_token_incl_softmax
        )
    }
}

/// Tape handles for one step.
pub struct ModelNodes {
    pub embed: NodeId,
    pub w_enc: NodeId,
    pub moe: MoeNodes,
    pub w_out: NodeId,
}

impl ModelNodes {
    /// Node ids in `ModelParams::named()` order, for gradient collection.
    pub fn named_order(&self) -> Vec<NodeId> {
        let mut out = vec![self.embed, self.w_enc, self.moe.w_gate, self.moe.w_noise];
        for &(w1, w2) in &self.moe.experts {
            out.push(w1);
            out.push(w2);
        }
        out.push(self.w_out);
        out
    }
}

pub fn register(params: &ModelParams, tape: &mut Tape) -> Result<ModelNodes> {
    Ok(ModelNodes {
        embed: tape.param(params.embed.clone()),
        w_enc: tape.param(params.w_enc.clone()),
        moe: params.moe.register(tape)?,
        w_out: tape.param(params.w_out.clone()),
    })
}

/// Training applies dropout and samples gate noise; evaluation is
/// deterministic with the noise path off.
pub enum Phase {
    Train { step: u64 },
    Eval,
}

/// Everything the training loop needs from one forward pass.
pub struct ForwardOutput {
    pub logits: NodeId,
    /// Effective combine weights: sparse softmax gates or masked batchwise
    /// gates, batch x n.
    pub gates: NodeId,
    /// Present in noisy mode; carries the load estimator's inputs.
    pub gate_result: Option<GateResult>,
    /// Present in batchwise training mode.
    pub batchwise: Option<BatchwiseOutput>,
    /// Expert row-evaluations this pass performed.
    pub expert_rows: usize,
}

fn dropout(tape: &mut Tape, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    if p == 0.0 {
        return Ok(x);
    }
    use rand::Rng;
    let (rows, cols) = tape.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask = Matrix::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

pub fn forward(
    tape: &mut Tape,
    nodes: &ModelNodes,
    cfg: &ToyLmConfig,
    thresholds: &[f64],
    batch: &Batch,
    phase: Phase,
) -> Result<ForwardOutput> {
    if batch.context_len != cfg.context_len {
        return Err(Error::invalid(format!(
            "batch windows are {} tokens, config wants {}",
            batch.context_len, cfg.context_len
        )));
    }
    let retain = !cfg.recompute_expert_activations;
    let emb = tape.embed_window(nodes.embed, &batch.ids, cfg.context_len)?;
    let enc = tape.matmul(emb, nodes.w_enc)?;
    let h0 = tape.tanh(enc);

    let (h0, moe_in, train_step) = match phase {
        Phase::Train { step } => {
            let mut drop_rng = stream_rng(cfg.seed, purpose::DROPOUT, step);
            let dropped = dropout(tape, h0, cfg.dropout_prob, &mut drop_rng)?;
            (dropped, dropped, Some((step, drop_rng)))
        }
        Phase::Eval => (h0, h0, None),
    };

    let (moe_y, gates, gate_result, batchwise, expert_rows) = match cfg.gating_mode {
        GatingMode::NoisyTopk => {
            let out = match &train_step {
                Some((step, _)) => {
                    let mut noise_rng = stream_rng(cfg.seed, purpose::GATE_NOISE, *step);
                    moe_forward(
                        tape,
                        moe_in,
                        &nodes.moe,
                        cfg.k,
                        GateNoise::Sample(&mut noise_rng),
                        retain,
                    )?
                }
                None => moe_forward(tape, moe_in, &nodes.moe, cfg.k, GateNoise::Off, retain)?,
            };
            let rows = out.plan.total_rows();
            (out.y, out.gate.gates, Some(out.gate), None, rows)
        }
        GatingMode::Batchwise => match &train_step {
            Some(_) => {
                let out = moe_forward_batchwise(tape, moe_in, &nodes.moe, cfg.k, retain)?;
                let rows = out.plan.total_rows();
                (out.y, out.gates, None, Some(out), rows)
            }
            None => {
                let out = moe_forward_threshold(tape, moe_in, &nodes.moe, thresholds, retain)?;
                let rows = out.plan.total_rows();
                (out.y, out.gates, None, Some(out), rows)
            }
        },
    };

    let moe_dropped = match train_step {
        Some((_, mut drop_rng)) => dropout(tape, moe_y, cfg.dropout_prob, &mut drop_rng)?,
        None => moe_y,
    };
    let h1 = tape.add(h0, moe_dropped)?;
    let logits = tape.matmul(h1, nodes.w_out)?;
    Ok(ForwardOutput {
        logits,
        gates,
        gate_result,
        batchwise,
        expert_rows,
    })
}
