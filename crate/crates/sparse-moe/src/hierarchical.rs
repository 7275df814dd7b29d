//! Two-level mixture: a primary gate picks groups, each group is itself a
//! flat mixture over its own experts.
//!
//! ```text
//! y_H = sum_i sum_j Gp(x)_i * Gi(x)_j * E_ij(x)
//! ```
//!
//! Only groups the primary gate selected see any compute, and inside a group
//! only its selected experts run, so an example touches
//! `k_primary * k_secondary` experts out of `a * b`.
//!
//! The hierarchical load uses the product form
//! `Load_H[i,j] = Load_p(X)_i * Load_i(X_i)_j / |X_i|` (X_i the rows routed
//! to group i) rather than a direct count, because the direct count has no
//! gradient into the primary gate. Empty groups contribute zero rows.

use rand_chacha::ChaCha8Rng;

use crate::balance::{cv_squared_node, load_node};
use crate::error::{Error, Result};
use crate::gating::{noisy_top_k_gate, GateNoise, GateResult};
use crate::kernel::{Matrix, NodeId, Tape};
use crate::moe::{build_dispatch, moe_forward, MoeNodes, MoeOutput, MoeParams};

/// Persistent parameters: primary gate over `a` groups plus the groups
/// themselves. Group layers must keep their combine linear (no sigmoid).
#[derive(Debug, Clone)]
pub struct HierParams {
    pub primary_w_gate: Matrix,
    pub primary_w_noise: Matrix,
    pub groups: Vec<MoeParams>,
}

impl HierParams {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        a_groups: usize,
        b_experts: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        HierParams {
            primary_w_gate: Matrix::zeros(input_dim, a_groups),
            primary_w_noise: Matrix::zeros(input_dim, a_groups),
            groups: (0..a_groups)
                .map(|_| MoeParams::init(input_dim, hidden_dim, output_dim, b_experts, false, rng))
                .collect(),
        }
    }

    pub fn a_groups(&self) -> usize {
        self.groups.len()
    }

    fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::invalid("hierarchy needs at least one group"));
        }
        if self.primary_w_gate.shape() != self.primary_w_noise.shape() {
            return Err(Error::Shape {
                op: "primary gate/noise weights",
                lhs: self.primary_w_gate.shape(),
                rhs: self.primary_w_noise.shape(),
            });
        }
        if self.primary_w_gate.cols() != self.groups.len() {
            return Err(Error::invalid(format!(
                "primary gate has {} columns but {} groups",
                self.primary_w_gate.cols(),
                self.groups.len()
            )));
        }
        let b = self.groups[0].n_experts();
        for (i, g) in self.groups.iter().enumerate() {
            if g.n_experts() != b {
                return Err(Error::invalid(format!(
                    "group {i} has {} experts, group 0 has {b}",
                    g.n_experts()
                )));
            }
            if g.sigmoid_output {
                return Err(Error::invalid(
                    "group layers must combine linearly inside a hierarchy",
                ));
            }
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> Result<HierNodes> {
        self.validate()?;
        Ok(HierNodes {
            primary_w_gate: tape.param(self.primary_w_gate.clone()),
            primary_w_noise: tape.param(self.primary_w_noise.clone()),
            groups: self
                .groups
                .iter()
                .map(|g| g.register(tape))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

pub struct HierNodes {
    pub primary_w_gate: NodeId,
    pub primary_w_noise: NodeId,
    pub groups: Vec<MoeNodes>,
}

/// Noise for both levels. `Fixed` supplies full-batch matrices (batch x a
/// primary, batch x b per group); each group gathers the rows it actually
/// receives, so routing changes never reshuffle the draws.
pub enum HierNoise<'a> {
    Off,
    Sample(&'a mut ChaCha8Rng),
    Fixed {
        primary: &'a Matrix,
        groups: &'a [Matrix],
    },
}

/// One evaluated group: which rows it received and its flat-mixture output.
pub struct GroupEval {
    pub rows: Vec<usize>,
    pub output: MoeOutput,
}

pub struct HierOutput {
    pub y: NodeId,
    pub primary: GateResult,
    /// Indexed by group; `None` when the group received no rows.
    pub groups: Vec<Option<GroupEval>>,
}

impl HierOutput {
    /// Total expert row-evaluations = k_primary * k_secondary * batch.
    pub fn expert_row_evals(&self) -> usize {
        self.groups
            .iter()
            .flatten()
            .map(|g| g.output.plan.total_rows())
            .sum()
    }
}

/// Sparse two-level forward pass.
pub fn hierarchical_forward(
    tape: &mut Tape,
    x: NodeId,
    nodes: &HierNodes,
    k_primary: usize,
    k_secondary: usize,
    noise: HierNoise,
    retain_activations: bool,
) -> Result<HierOutput> {
    let (batch, _) = tape.shape(x);
    let a = nodes.groups.len();
    let b = nodes.groups[0].experts.len();

    let (primary_eps, group_eps): (Option<Matrix>, Option<Vec<Matrix>>) = match noise {
        HierNoise::Off => (None, None),
        HierNoise::Sample(rng) => {
            let p = Matrix::gaussian(batch, a, rng);
            let g = (0..a).map(|_| Matrix::gaussian(batch, b, rng)).collect();
            (Some(p), Some(g))
        }
        HierNoise::Fixed { primary, groups } => {
            if primary.shape() != (batch, a) || groups.len() != a {
                return Err(Error::invalid("fixed hierarchy noise has wrong shape"));
            }
            for g in groups {
                if g.shape() != (batch, b) {
                    return Err(Error::invalid("fixed group noise has wrong shape"));
                }
            }
            (Some(primary.clone()), Some(groups.to_vec()))
        }
    };

    let primary_noise = match &primary_eps {
        Some(eps) => GateNoise::Fixed(eps),
        None => GateNoise::Off,
    };
    let primary = noisy_top_k_gate(
        tape,
        x,
        nodes.primary_w_gate,
        nodes.primary_w_noise,
        k_primary,
        primary_noise,
    )?;

    let out_dim = nodes.groups[0].output_dim;
    if batch == 0 {
        let y = tape.constant(Matrix::zeros(0, out_dim));
        return Ok(HierOutput {
            y,
            primary,
            groups: (0..a).map(|_| None).collect(),
        });
    }

    let plan = build_dispatch(tape.value(primary.gates), &primary.top_k);
    let mut groups = Vec::with_capacity(a);
    let mut terms = Vec::new();
    for (i, assigned) in plan.assignments.iter().enumerate() {
        if assigned.is_empty() {
            groups.push(None);
            continue;
        }
        let rows: Vec<usize> = assigned.iter().map(|&(r, _)| r).collect();
        let xi = tape.gather_rows(x, &rows)?;
        let sub_eps = group_eps
            .as_ref()
            .map(|eps| eps[i].gather_rows(&rows));
        let noise = match &sub_eps {
            Some(eps) => GateNoise::Fixed(eps),
            None => GateNoise::Off,
        };
        let output = moe_forward(tape, xi, &nodes.groups[i], k_secondary, noise, retain_activations)?;
        let coords: Vec<(usize, usize)> = rows.iter().map(|&r| (r, i)).collect();
        let gp = tape.gather(primary.gates, coords, rows.len(), 1)?;
        let weighted = tape.mul_col(output.y, gp)?;
        terms.push(tape.scatter_rows(weighted, &rows, batch)?);
        groups.push(Some(GroupEval { rows, output }));
    }
    let y = tape.add_n(&terms)?;
    Ok(HierOutput { y, primary, groups })
}

/// Assemble `Importance_H[i,j] = sum_x Gp(x)_i * Gi(x)_j` from gate nodes.
/// `parts[i]` holds group i's routed rows and its secondary gate node.
pub fn importance_h_parts(
    tape: &mut Tape,
    primary_gates: NodeId,
    parts: &[Option<(Vec<usize>, NodeId)>],
) -> Result<NodeId> {
    let a = parts.len();
    if parts.iter().all(Option::is_none) {
        return Err(Error::invalid("importance_h: no group was evaluated"));
    }
    let mut terms = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        let Some((rows, gates)) = part else { continue };
        let coords: Vec<(usize, usize)> = rows.iter().map(|&r| (r, i)).collect();
        let gp = tape.gather(primary_gates, coords, rows.len(), 1)?;
        let weighted = tape.mul_col(*gates, gp)?;
        let sums = tape.col_sums(weighted);
        terms.push(tape.scatter_rows(sums, &[i], a)?);
    }
    tape.add_n(&terms)
}

/// `Importance_H` for a forward pass, a x b on the tape.
pub fn importance_h(tape: &mut Tape, out: &HierOutput) -> Result<NodeId> {
    let parts: Vec<Option<(Vec<usize>, NodeId)>> = out
        .groups
        .iter()
        .map(|g| {
            g.as_ref()
                .map(|ge| (ge.rows.clone(), ge.output.gate.gates))
        })
        .collect();
    importance_h_parts(tape, out.primary.gates, &parts)
}

/// Assemble `Load_H[i,j] = primary_load_i * group_load_i_j / subbatch_i`.
/// `group_loads[i]` is `None` exactly when group i received no rows, which
/// forces a zero row.
pub fn load_h_parts(
    tape: &mut Tape,
    primary_load: NodeId,
    group_loads: &[Option<NodeId>],
    subbatch_sizes: &[usize],
) -> Result<NodeId> {
    let a = group_loads.len();
    if subbatch_sizes.len() != a || tape.shape(primary_load) != (1, a) {
        return Err(Error::invalid("load_h: inconsistent part shapes"));
    }
    let mut terms = Vec::new();
    for (i, gl) in group_loads.iter().enumerate() {
        let Some(group_load) = gl else { continue };
        if subbatch_sizes[i] == 0 {
            return Err(Error::invalid(
                "load_h: evaluated group reported an empty sub-batch",
            ));
        }
        let averaged = tape.scale(*group_load, 1.0 / subbatch_sizes[i] as f64);
        let lp = tape.gather(primary_load, vec![(0, i)], 1, 1)?;
        let row = tape.scale_by(averaged, lp)?;
        terms.push(tape.scatter_rows(row, &[i], a)?);
    }
    if terms.is_empty() {
        return Err(Error::invalid("load_h: no group was evaluated"));
    }
    tape.add_n(&terms)
}

/// `Load_H` for a forward pass: primary load times per-group mean load.
pub fn load_h(tape: &mut Tape, out: &HierOutput) -> Result<NodeId> {
    let primary_load = load_node(tape, &out.primary)?;
    let mut group_loads = Vec::with_capacity(out.groups.len());
    let mut sizes = Vec::with_capacity(out.groups.len());
    for g in &out.groups {
        match g {
            Some(ge) => {
                group_loads.push(Some(load_node(tape, &ge.output.gate)?));
                sizes.push(ge.rows.len());
            }
            None => {
                group_loads.push(None);
                sizes.push(0);
            }
        }
    }
    load_h_parts(tape, primary_load, &group_loads, &sizes)
}

/// `w * CV^2` of the flattened a x b importance matrix.
pub fn importance_h_loss(tape: &mut Tape, out: &HierOutput, w: f64) -> Result<NodeId> {
    let imp = importance_h(tape, out)?;
    let cv2 = cv_squared_node(tape, imp)?;
    Ok(tape.scale(cv2, w))
}

/// `w * CV^2` of the flattened a x b load matrix.
pub fn load_h_loss(tape: &mut Tape, out: &HierOutput, w: f64) -> Result<NodeId> {
    let load = load_h(tape, out)?;
    let cv2 = cv_squared_node(tape, load)?;
    Ok(tape.scale(cv2, w))
}
