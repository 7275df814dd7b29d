//! Expert networks and the flat mixture layer.
//!
//! `moe_forward` routes each example to its gate-selected experts, runs each
//! expert once on the rows it actually received, and combines the outputs
//! weighted by the gate values. Experts nobody selected add zero tape nodes;
//! that is the whole point of the sparse gate.

use crate::error::{Error, Result};
use crate::gating::{noisy_top_k_gate, GateNoise, GateResult};
use crate::kernel::{Matrix, NodeId, Tape};
use rand_chacha::ChaCha8Rng;

/// One expert: feed-forward with a single ReLU hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl ExpertParams {
    /// Uniform init in +-sqrt(6/(fan_in+fan_out)).
    pub fn init(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let l1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let l2 = (6.0 / (hidden_dim + output_dim) as f64).sqrt();
        ExpertParams {
            w1: Matrix::uniform(input_dim, hidden_dim, l1, rng),
            w2: Matrix::uniform(hidden_dim, output_dim, l2, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

/// Persistent parameters of a flat mixture layer.
///
/// Gating weights start at zero: uniform initial gates, noise stddev
/// softplus(0) everywhere, so early routing is driven by the noise alone.
#[derive(Debug, Clone)]
pub struct MoeParams {
    pub w_gate: Matrix,
    pub w_noise: Matrix,
    pub experts: Vec<ExpertParams>,
    /// Apply a sigmoid after the weighted combine.
    pub sigmoid_output: bool,
}

impl MoeParams {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        n_experts: usize,
        sigmoid_output: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MoeParams {
            w_gate: Matrix::zeros(input_dim, n_experts),
            w_noise: Matrix::zeros(input_dim, n_experts),
            experts: (0..n_experts)
                .map(|_| ExpertParams::init(input_dim, hidden_dim, output_dim, rng))
                .collect(),
            sigmoid_output,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn output_dim(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.experts[0].w2.cols())
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::invalid("mixture layer needs at least one expert"));
        }
        if self.w_gate.shape() != self.w_noise.shape() {
            return Err(Error::Shape {
                op: "gate/noise weights",
                lhs: self.w_gate.shape(),
                rhs: self.w_noise.shape(),
            });
        }
        if self.w_gate.cols() != self.experts.len() {
            return Err(Error::invalid(format!(
                "gate has {} columns but layer has {} experts",
                self.w_gate.cols(),
                self.experts.len()
            )));
        }
        let shape = (self.experts[0].w1.shape(), self.experts[0].w2.shape());
        for (i, e) in self.experts.iter().enumerate() {
            if (e.w1.shape(), e.w2.shape()) != shape {
                return Err(Error::invalid(format!(
                    "expert {i} architecture differs from expert 0"
                )));
            }
            if e.w1.cols() != e.w2.rows() {
                return Err(Error::Shape {
                    op: "expert hidden",
                    lhs: e.w1.shape(),
                    rhs: e.w2.shape(),
                });
            }
        }
        if self.experts[0].w1.rows() != self.w_gate.rows() {
            return Err(Error::invalid(
                "expert input dim differs from gating input dim",
            ));
        }
        Ok(())
    }

    /// Put every parameter on the tape as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape) -> Result<MoeNodes> {
        self.validate()?;
        Ok(MoeNodes {
            w_gate: tape.param(self.w_gate.clone()),
            w_noise: tape.param(self.w_noise.clone()),
            experts: self
                .experts
                .iter()
                .map(|e| (tape.param(e.w1.clone()), tape.param(e.w2.clone())))
                .collect(),
            sigmoid_output: self.sigmoid_output,
            output_dim: self.experts[0].w2.cols(),
        })
    }
}

/// Tape handles for one step's view of the layer parameters.
pub struct MoeNodes {
    pub w_gate: NodeId,
    pub w_noise: NodeId,
    pub experts: Vec<(NodeId, NodeId)>,
    pub sigmoid_output: bool,
    pub output_dim: usize,
}

/// Rows routed to each expert, with the gate value each row assigned it.
#[derive(Debug, Clone)]
pub struct DispatchPlan {
    pub assignments: Vec<Vec<(usize, f64)>>,
}

impl DispatchPlan {
    /// Total expert row-evaluations this plan costs (= k * batch).
    pub fn total_rows(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }
}

/// Group example rows by selected expert, ascending row order within each.
pub fn build_dispatch(gates: &Matrix, top_k: &[Vec<usize>]) -> DispatchPlan {
    let mut assignments = vec![Vec::new(); gates.cols()];
    for (row, sel) in top_k.iter().enumerate() {
        for &e in sel {
            assignments[e].push((row, gates.at(row, e)));
        }
    }
    DispatchPlan { assignments }
}

/// `relu(x . w1) . w2` as a single fused tape node.
pub fn expert_forward(
    tape: &mut Tape,
    x: NodeId,
    w1: NodeId,
    w2: NodeId,
    retain_activations: bool,
) -> Result<NodeId> {
    tape.expert_ff(x, w1, w2, retain_activations)
}

pub struct MoeOutput {
    pub y: NodeId,
    pub gate: GateResult,
    pub plan: DispatchPlan,
}

/// Sparse forward pass: gate, dispatch, per-expert evaluation, weighted
/// combine in expert-index order, optional sigmoid.
pub fn moe_forward(
    tape: &mut Tape,
    x: NodeId,
    nodes: &MoeNodes,
    k: usize,
    noise: GateNoise,
    retain_activations: bool,
) -> Result<MoeOutput> {
    let gate = noisy_top_k_gate(tape, x, nodes.w_gate, nodes.w_noise, k, noise)?;
    let (batch, _) = tape.shape(x);
    let plan = build_dispatch(tape.value(gate.gates), &gate.top_k);

    if batch == 0 {
        let y = tape.constant(Matrix::zeros(0, nodes.output_dim));
        return Ok(MoeOutput { y, gate, plan });
    }

    let mut terms = Vec::new();
    for (e, rows) in plan.assignments.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let row_ids: Vec<usize> = rows.iter().map(|&(r, _)| r).collect();
        let xe = tape.gather_rows(x, &row_ids)?;
        let (w1, w2) = nodes.experts[e];
        let ye = expert_forward(tape, xe, w1, w2, retain_activations)?;
        let coords: Vec<(usize, usize)> = row_ids.iter().map(|&r| (r, e)).collect();
        let ge = tape.gather(gate.gates, coords, row_ids.len(), 1)?;
        let weighted = tape.mul_col(ye, ge)?;
        terms.push(tape.scatter_rows(weighted, &row_ids, batch)?);
    }
    let combined = tape.add_n(&terms)?;
    let y = if nodes.sigmoid_output {
        tape.sigmoid(combined)
    } else {
        combined
    };
    Ok(MoeOutput { y, gate, plan })
}
