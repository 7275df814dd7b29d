//! Gating networks: softmax, top-k selection, and noisy top-k.
//!
//! The sparse gate computes per-example logits H(x), keeps the k largest per
//! row, and softmaxes over the kept entries; everything else is exactly zero,
//! so downstream experts with zero gate never run. Selection itself is
//! discrete and carries no gradient (the mask is a tape constant); gradients
//! flow through the kept logits only. With noise enabled,
//! `H(x) = x.Wg + eps * softplus(x.Wn)`, which gives the load estimator in
//! `balance` something smooth to differentiate.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{Matrix, NodeId, Tape};

/// Noise mode for a gate evaluation.
///
/// `Fixed` replays a previously drawn standard-normal sample; finite
/// difference checks and the load-estimator oracle depend on it.
pub enum GateNoise<'a> {
    Off,
    Sample(&'a mut ChaCha8Rng),
    Fixed(&'a Matrix),
}

/// Everything a gate evaluation produces beyond the gate values themselves.
pub struct GateResult {
    /// batch x n; each row sums to 1 with exactly k nonzero entries.
    pub gates: NodeId,
    /// Selected experts per row, ordered by descending H value (ties resolve
    /// to the lower index).
    pub top_k: Vec<Vec<usize>>,
    /// Clean logits `x . w_gate`.
    pub clean: NodeId,
    /// Pre-selection logits H(x); equals `clean` when noise is off.
    pub noisy: NodeId,
    /// `softplus(x . w_noise)`, present when noise is on.
    pub stddev: Option<NodeId>,
    /// The standard-normal draw actually used, for replay.
    pub noise_sample: Option<Matrix>,
}

/// Dense baseline gate: `softmax(x . w_gate)` row-wise.
pub fn softmax_gate(tape: &mut Tape, x: NodeId, w_gate: NodeId) -> Result<NodeId> {
    let logits = tape.matmul(x, w_gate)?;
    tape.softmax_rows(logits)
}

/// Indices of the k largest entries, by value descending then index
/// ascending. Assumes finite values.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Smallest gap between the k-th and (k+1)-th logit across rows. Finite
/// difference checks need this comfortably above the perturbation step,
/// otherwise the selection flips mid-check.
pub fn min_top_k_margin(h: &Matrix, k: usize) -> f64 {
    if k >= h.cols() {
        return f64::INFINITY;
    }
    let mut margin = f64::INFINITY;
    for r in 0..h.rows() {
        let mut vals: Vec<f64> = h.row(r).to_vec();
        vals.sort_by(|a, b| b.partial_cmp(a).expect("finite logits"));
        margin = margin.min(vals[k - 1] - vals[k]);
    }
    margin
}

fn validate_k(k: usize, n: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("top-k gate requires k >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "top-k gate requires k <= number of experts, got k={k} with n={n}"
        )));
    }
    Ok(())
}

/// Mask all but the k largest entries per row to -inf and softmax the rest.
/// Returns the gates and the per-row selections.
pub fn keep_top_k(tape: &mut Tape, h: NodeId, k: usize) -> Result<(NodeId, Vec<Vec<usize>>)> {
    let hv = tape.value(h);
    let n = hv.cols();
    validate_k(k, n)?;
    if !hv.all_finite() {
        return Err(Error::invalid("gate logits are not finite"));
    }
    let mut mask = vec![false; hv.len()];
    let mut top_k = Vec::with_capacity(hv.rows());
    for r in 0..hv.rows() {
        let sel = top_k_indices(hv.row(r), k);
        for &i in &sel {
            mask[r * n + i] = true;
        }
        top_k.push(sel);
    }
    let masked = tape.mask_neg_inf(h, &mask)?;
    let gates = tape.softmax_rows(masked)?;
    Ok((gates, top_k))
}

/// Sparse gate `softmax(keep_top_k(H(x), k))` with optional multiplicative
/// noise on the logits. `w_noise` is only read when noise is on.
pub fn noisy_top_k_gate(
    tape: &mut Tape,
    x: NodeId,
    w_gate: NodeId,
    w_noise: NodeId,
    k: usize,
    noise: GateNoise,
) -> Result<GateResult> {
    validate_k(k, tape.shape(w_gate).1)?;
    let clean = tape.matmul(x, w_gate)?;
    let (noisy, stddev, noise_sample) = match noise {
        GateNoise::Off => (clean, None, None),
        GateNoise::Sample(rng) => {
            let (batch, n) = tape.shape(clean);
            let eps = Matrix::gaussian(batch, n, rng);
            let raw = tape.matmul(x, w_noise)?;
            let stddev = tape.softplus(raw);
            let eps_node = tape.constant(eps.clone());
            let scaled = tape.mul(stddev, eps_node)?;
            let noisy = tape.add(clean, scaled)?;
            (noisy, Some(stddev), Some(eps))
        }
        GateNoise::Fixed(eps) => {
            if eps.shape() != tape.shape(clean) {
                return Err(Error::Shape {
                    op: "noisy_top_k_gate fixed noise",
                    lhs: tape.shape(clean),
                    rhs: eps.shape(),
                });
            }
            let raw = tape.matmul(x, w_noise)?;
            let stddev = tape.softplus(raw);
            let eps_node = tape.constant(eps.clone());
            let scaled = tape.mul(stddev, eps_node)?;
            let noisy = tape.add(clean, scaled)?;
            (noisy, Some(stddev), Some(eps.clone()))
        }
    };
    let (gates, top_k) = keep_top_k(tape, noisy, k)?;
    Ok(GateResult {
        gates,
        top_k,
        clean,
        noisy,
        stddev,
        noise_sample,
    })
}
