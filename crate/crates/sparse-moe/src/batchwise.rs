//! Batchwise-balanced gating and learned inference thresholds.
//!
//! Instead of each example picking its own top k experts, the batch as a
//! whole keeps the top `m = k*|X|/n` gate values per expert column, which
//! makes expert load exactly balanced by construction. Masked gates are
//! renormalized per row; a row whose entire mask is zero produces a zero
//! output row (that example is processed by no expert).
//!
//! Batchwise masking needs the whole batch, which inference may not have, so
//! a per-expert threshold vector T is trained to imitate the batchwise mask:
//!
//! ```text
//! L(X, T, m) = sum_j sum_i (M_thr(x_j, T)_i - M_bw(X, m)_{j,i}) (X_{j,i} - T_i)
//! ```
//!
//! Gradients from this loss flow into T only; the gate values and both masks
//! are treated as constants. (Whether the paper also meant it to shape the
//! gate is unstated; restricting to T is the conservative reading.)

use crate::error::{Error, Result};
use crate::gating::top_k_indices;
use crate::kernel::{Matrix, NodeId, Tape};
use crate::moe::{build_dispatch, expert_forward, DispatchPlan, MoeNodes};

/// `m = k*batch/n`, floored. The second value is false when n does not
/// divide k*batch and the floor actually dropped something.
pub fn batchwise_m(k: usize, batch: usize, n: usize) -> (usize, bool) {
    let exact = (k * batch) % n == 0;
    (k * batch / n, exact)
}

/// 0/1 row marking the k largest entries, ties to the lower index.
pub fn topk_mask(v: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("topk_mask requires k >= 1"));
    }
    if k > v.len() {
        return Err(Error::invalid(format!(
            "topk_mask requires k <= {}, got {k}",
            v.len()
        )));
    }
    let mut mask = vec![0.0; v.len()];
    for i in top_k_indices(v, k) {
        mask[i] = 1.0;
    }
    Ok(mask)
}

/// 0/1 matrix keeping the top m values per expert column across the batch,
/// ties to the lower example index. Every column holds exactly m ones.
pub fn batchwise_mask(g: &Matrix, m: usize) -> Result<Matrix> {
    if m > g.rows() {
        return Err(Error::invalid(format!(
            "batchwise mask needs m <= batch, got m={m} batch={}",
            g.rows()
        )));
    }
    let mut mask = Matrix::zeros(g.rows(), g.cols());
    for j in 0..g.cols() {
        let col: Vec<f64> = (0..g.rows()).map(|r| g.at(r, j)).collect();
        for r in top_k_indices(&col, m) {
            mask.set(r, j, 1.0);
        }
    }
    Ok(mask)
}

/// 0/1 vector of `x_i > T_i`, strictly.
pub fn threshold_mask(row: &[f64], t: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(t)
        .map(|(&x, &ti)| if x > ti { 1.0 } else { 0.0 })
        .collect()
}

/// Row-wise threshold mask for a whole batch of gate values.
pub fn threshold_mask_matrix(g: &Matrix, t: &[f64]) -> Matrix {
    Matrix::from_fn(g.rows(), g.cols(), |r, c| {
        if g.at(r, c) > t[c] {
            1.0
        } else {
            0.0
        }
    })
}

/// Mask and renormalize dense gates:
/// `G_i = g_i m_i / sum_j g_j m_j`, with all-zero-mask rows mapped to zero
/// rows rather than dividing by zero. Differentiable through the gates; the
/// mask is a constant.
pub fn masked_gate(tape: &mut Tape, gates_dense: NodeId, mask: &Matrix) -> Result<NodeId> {
    if tape.shape(gates_dense) != mask.shape() {
        return Err(Error::Shape {
            op: "masked_gate",
            lhs: tape.shape(gates_dense),
            rhs: mask.shape(),
        });
    }
    let mask_node = tape.constant(mask.clone());
    let kept = tape.mul(gates_dense, mask_node)?;
    let denom = tape.row_sums(kept);
    // Rows with nothing kept get denominator 1; their numerator is already
    // all zero, so the output row is zero with zero gradient.
    let fix = Matrix::from_fn(mask.rows(), 1, |r, _| {
        if tape.value(denom).at(r, 0) == 0.0 {
            1.0
        } else {
            0.0
        }
    });
    let fix_node = tape.constant(fix);
    let safe = tape.add(denom, fix_node)?;
    tape.div_col(kept, safe)
}

/// Smallest |gate - threshold| margin; finite-difference checks on T need it
/// above the perturbation step or the masks flip mid-check.
pub fn min_threshold_margin(g: &Matrix, t: &[f64]) -> f64 {
    let mut margin = f64::INFINITY;
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            margin = margin.min((g.at(r, c) - t[c]).abs());
        }
    }
    margin
}

/// The threshold-fitting loss, differentiable in T (1 x n node). Gate values
/// and both masks enter as constants:
/// `L = sum(D . G) - dot(colsums(D), T)` with `D = M_thr - M_bw`.
pub fn threshold_loss(tape: &mut Tape, g_dense: &Matrix, t: NodeId, m: usize) -> Result<NodeId> {
    let (_, n) = g_dense.shape();
    if tape.shape(t) != (1, n) {
        return Err(Error::Shape {
            op: "threshold_loss",
            lhs: (1, n),
            rhs: tape.shape(t),
        });
    }
    let t_vals = tape.value(t).row(0).to_vec();
    let m_thr = threshold_mask_matrix(g_dense, &t_vals);
    let m_bw = batchwise_mask(g_dense, m)?;
    let d = m_thr.sub(&m_bw)?;
    let dx: f64 = d
        .data()
        .iter()
        .zip(g_dense.data())
        .map(|(&di, &gi)| di * gi)
        .sum();
    let colsums_d = tape.constant(d.col_sums());
    let weighted_t = tape.mul(colsums_d, t)?;
    let t_term = tape.sum(weighted_t);
    let dx_node = tape.constant(Matrix::scalar(dx));
    tape.sub(dx_node, t_term)
}

/// Fraction of mask entries where the threshold mask agrees with the
/// batchwise mask on this batch.
pub fn mask_agreement(g: &Matrix, t: &[f64], m: usize) -> Result<f64> {
    let m_thr = threshold_mask_matrix(g, t);
    let m_bw = batchwise_mask(g, m)?;
    if g.is_empty() {
        return Err(Error::EmptyBatch("mask_agreement"));
    }
    let agree = m_thr
        .data()
        .iter()
        .zip(m_bw.data())
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / g.len() as f64)
}

/// Plain gradient descent on T, cycling the given gate batches. Returns the
/// trained thresholds.
pub fn train_thresholds(
    batches: &[Matrix],
    t_init: &[f64],
    m: usize,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch("train_thresholds"));
    }
    let mut t = Matrix::from_rows(&[t_init.to_vec()])?;
    for step in 0..steps {
        let g = &batches[step % batches.len()];
        let mut tape = Tape::new();
        let t_node = tape.param(t.clone());
        let loss = threshold_loss(&mut tape, g, t_node, m)?;
        let grads = tape.backward(loss)?;
        if let Some(dt) = grads.get(t_node) {
            for (ti, &gi) in t.data_mut().iter_mut().zip(dt.data()) {
                *ti -= lr * gi;
            }
        }
    }
    Ok(t.data().to_vec())
}

/// One in-place gradient-descent update of the thresholds against a single
/// batch of dense gates. The loss gradient is -colsums(M_thr - M_bw), so no
/// tape is needed.
pub fn threshold_step(g_dense: &Matrix, t: &mut [f64], m: usize, lr: f64) -> Result<()> {
    if t.len() != g_dense.cols() {
        return Err(Error::Shape {
            op: "threshold_step",
            lhs: (1, t.len()),
            rhs: g_dense.shape(),
        });
    }
    let m_thr = threshold_mask_matrix(g_dense, t);
    let m_bw = batchwise_mask(g_dense, m)?;
    let d = m_thr.sub(&m_bw)?;
    for (ti, &ci) in t.iter_mut().zip(d.col_sums().data()) {
        *ti += lr * ci;
    }
    Ok(())
}

/// Output of a batchwise-gated mixture layer pass.
pub struct BatchwiseOutput {
    pub y: NodeId,
    /// Masked, renormalized gates (rows sum to 1 or are all zero).
    pub gates: NodeId,
    /// Dense softmax gates before masking.
    pub dense: NodeId,
    pub mask: Matrix,
    pub plan: DispatchPlan,
}

/// Mixture forward pass under batchwise masking: dense softmax gate, top-m
/// column mask, renormalize, dispatch exactly m rows to every expert.
pub fn moe_forward_batchwise(
    tape: &mut Tape,
    x: NodeId,
    nodes: &MoeNodes,
    k: usize,
    retain_activations: bool,
) -> Result<BatchwiseOutput> {
    let (batch, _) = tape.shape(x);
    let logits = tape.matmul(x, nodes.w_gate)?;
    let dense = tape.softmax_rows(logits)?;
    let (m, _exact) = batchwise_m(k, batch, nodes.experts.len());
    let mask = batchwise_mask(tape.value(dense), m)?;
    combine_masked(tape, x, nodes, dense, mask, retain_activations)
}

/// Mixture forward pass gated by learned per-expert thresholds, the
/// batch-independent stand-in for the batchwise mask at inference time.
pub fn moe_forward_threshold(
    tape: &mut Tape,
    x: NodeId,
    nodes: &MoeNodes,
    thresholds: &[f64],
    retain_activations: bool,
) -> Result<BatchwiseOutput> {
    if thresholds.len() != nodes.experts.len() {
        return Err(Error::Shape {
            op: "moe_forward_threshold",
            lhs: (1, thresholds.len()),
            rhs: (1, nodes.experts.len()),
        });
    }
    let logits = tape.matmul(x, nodes.w_gate)?;
    let dense = tape.softmax_rows(logits)?;
    let mask = threshold_mask_matrix(tape.value(dense), thresholds);
    combine_masked(tape, x, nodes, dense, mask, retain_activations)
}

fn combine_masked(
    tape: &mut Tape,
    x: NodeId,
    nodes: &MoeNodes,
    dense: NodeId,
    mask: Matrix,
    retain_activations: bool,
) -> Result<BatchwiseOutput> {
    let (batch, _) = tape.shape(x);
    let n = nodes.experts.len();
    let gates = masked_gate(tape, dense, &mask)?;

    let selected: Vec<Vec<usize>> = (0..batch)
        .map(|r| (0..n).filter(|&j| mask.at(r, j) == 1.0).collect())
        .collect();
    let plan = build_dispatch(tape.value(gates), &selected);

    if batch == 0 || plan.total_rows() == 0 {
        let y = tape.constant(Matrix::zeros(batch, nodes.output_dim));
        return Ok(BatchwiseOutput {
            y,
            gates,
            dense,
            mask,
            plan,
        });
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
        let ge = tape.gather(gates, coords, row_ids.len(), 1)?;
        let weighted = tape.mul_col(ye, ge)?;
        terms.push(tape.scatter_rows(weighted, &row_ids, batch)?);
    }
    let combined = tape.add_n(&terms)?;
    let y = if nodes.sigmoid_output {
        tape.sigmoid(combined)
    } else {
        combined
    };
    Ok(BatchwiseOutput {
        y,
        gates,
        dense,
        mask,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{noisy_top_k_gate, GateNoise};
    use crate::gradcheck::check_gradients;
    use crate::kernel::{softmax_rows, stream_rng};
    use crate::moe::MoeParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn random_gates(seed: u64, batch: usize, n: usize) -> Matrix {
        softmax_rows(&Matrix::gaussian_seeded(batch, n, seed)).unwrap()
    }

    #[test]
    fn identity_mask_keeps_gates() {
        let g = random_gates(70, 5, 4);
        let mut tape = Tape::new();
        let gn = tape.param(g.clone());
        let out = masked_gate(&mut tape, gn, &Matrix::filled(5, 4, 1.0)).unwrap();
        assert!(tape.value(out).max_abs_diff(&g).unwrap() < 1e-12);
    }

    #[test]
    fn single_survivor_becomes_one() {
        let g = random_gates(71, 3, 4);
        let mask = Matrix::from_fn(3, 4, |_, c| if c == 2 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let gn = tape.param(g);
        let out = masked_gate(&mut tape, gn, &mask).unwrap();
        for r in 0..3 {
            assert_abs_diff_eq!(tape.value(out).at(r, 2), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn all_zero_mask_row_gives_zero_row() {
        let g = random_gates(72, 2, 3);
        let mask = Matrix::from_fn(2, 3, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let gn = tape.param(g);
        let out = masked_gate(&mut tape, gn, &mask).unwrap();
        let v = tape.value(out);
        assert_abs_diff_eq!(v.row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(v.row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn topk_mask_counts_and_ties() {
        assert_eq!(topk_mask(&[1.0, 3.0, 2.0], 2).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(topk_mask(&[2.0, 2.0, 2.0], 2).unwrap(), vec![1.0, 1.0, 0.0]);
        assert!(topk_mask(&[1.0], 0).is_err());
        assert!(topk_mask(&[1.0], 2).is_err());
    }

    #[test]
    fn per_row_topk_masking_matches_noisy_gate_formulation() {
        // Same sparse gate two ways: -inf masking + softmax (selection form)
        // versus dense softmax + 0/1 mask + renormalize (batch form).
        let mut rng = stream_rng(73, 0, 0);
        let x = Matrix::gaussian(6, 4, &mut rng);
        let wg = Matrix::gaussian(4, 5, &mut rng);

        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let wgn = tape.param(wg);
        let wnn = tape.param(Matrix::zeros(4, 5));
        let reference = noisy_top_k_gate(&mut tape, xn, wgn, wnn, 2, GateNoise::Off).unwrap();

        let logits = tape.matmul(xn, wgn).unwrap();
        let dense = tape.softmax_rows(logits).unwrap();
        let dense_vals = tape.value(dense).clone();
        let mut mask_rows = Vec::new();
        for r in 0..6 {
            mask_rows.push(topk_mask(dense_vals.row(r), 2).unwrap());
        }
        let mask = Matrix::from_rows(&mask_rows).unwrap();
        let renorm = masked_gate(&mut tape, dense, &mask).unwrap();

        let diff = tape
            .value(reference.gates)
            .max_abs_diff(tape.value(renorm))
            .unwrap();
        assert!(diff < 1e-12, "formulations disagree by {diff}");
    }

    #[test]
    fn batchwise_mask_column_counts() {
        let g = random_gates(74, 4, 2);
        let mask = batchwise_mask(&g, 2).unwrap();
        for j in 0..2 {
            let ones: usize = (0..4).map(|r| mask.at(r, j) as usize).sum();
            assert_eq!(ones, 2);
        }
        assert_eq!(mask.sum(), 4.0);
        assert!(batchwise_mask(&g, 5).is_err());
    }

    #[test]
    fn batchwise_mask_uniform_ties_pick_first_rows() {
        let g = Matrix::filled(5, 3, 1.0 / 3.0);
        let mask = batchwise_mask(&g, 2).unwrap();
        for j in 0..3 {
            assert_eq!(mask.at(0, j), 1.0);
            assert_eq!(mask.at(1, j), 1.0);
            assert_eq!(mask.at(2, j), 0.0);
        }
    }

    #[test]
    fn batchwise_mask_matches_sort_oracle() {
        let g = random_gates(75, 16, 5);
        let m = 6;
        let mask = batchwise_mask(&g, m).unwrap();
        for j in 0..5 {
            let mut vals: Vec<(f64, usize)> = (0..16).map(|r| (g.at(r, j), r)).collect();
            vals.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for (rank, &(_, r)) in vals.iter().enumerate() {
                assert_eq!(mask.at(r, j), if rank < m { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn batchwise_m_divisibility() {
        assert_eq!(batchwise_m(1, 4, 2), (2, true));
        assert_eq!(batchwise_m(2, 6, 4), (3, true));
        assert_eq!(batchwise_m(1, 5, 2), (2, false));
    }

    #[test]
    fn threshold_mask_is_strict() {
        assert_eq!(threshold_mask(&[0.5, 0.2], &[0.5, 0.1]), vec![0.0, 1.0]);
        assert_eq!(threshold_mask(&[0.5, 0.2], &[9.0, 9.0]), vec![0.0, 0.0]);
        assert_eq!(threshold_mask(&[0.5, 0.2], &[-9.0, -9.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn threshold_loss_zero_on_agreement() {
        // With T just below the m-th column value, the threshold mask equals
        // the batchwise mask, and the loss vanishes.
        let g = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
        let m = 2;
        let bw = batchwise_mask(&g, m).unwrap();
        let mut t = vec![0.0; 2];
        for j in 0..2 {
            let mut kept: Vec<f64> = (0..3)
                .filter(|&r| bw.at(r, j) == 1.0)
                .map(|r| g.at(r, j))
                .collect();
            kept.sort_by(|a, b| a.partial_cmp(b).unwrap());
            t[j] = kept[0] - 1e-6;
        }
        let mut tape = Tape::new();
        let tn = tape.param(Matrix::from_rows(&[t]).unwrap());
        let loss = threshold_loss(&mut tape, &g, tn, m).unwrap();
        assert_abs_diff_eq!(tape.value(loss).at(0, 0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn threshold_loss_hand_example() {
        // Column of two gate values, m=1: batchwise keeps only 0.8. With
        // T=0.2 the threshold mask claims both, so the one disagreement at
        // 0.5 contributes (1-0)*(0.5-0.2) = 0.3.
        let g = Matrix::from_rows(&[vec![0.8], vec![0.5]]).unwrap();
        let mut tape = Tape::new();
        let tn = tape.param(Matrix::from_rows(&[vec![0.2]]).unwrap());
        let loss = threshold_loss(&mut tape, &g, tn, 1).unwrap();
        assert_abs_diff_eq!(tape.value(loss).at(0, 0), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn threshold_gradient_is_negative_mask_disagreement_sum() {
        let g = random_gates(76, 12, 4);
        let m = 5;
        let t_vals = vec![0.3, 0.25, 0.2, 0.35];
        let mut tape = Tape::new();
        let tn = tape.param(Matrix::from_rows(&[t_vals.clone()]).unwrap());
        let loss = threshold_loss(&mut tape, &g, tn, m).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dt = grads.get(tn).unwrap();

        let d = threshold_mask_matrix(&g, &t_vals)
            .sub(&batchwise_mask(&g, m).unwrap())
            .unwrap();
        let expect = d.col_sums().scale(-1.0);
        assert!(dt.max_abs_diff(&expect).unwrap() < 1e-12);

        // And against finite differences, provided no gate sits within the
        // perturbation step of a threshold.
        assert!(min_threshold_margin(&g, &t_vals) > 1e-3);
        let g2 = g.clone();
        let out = check_gradients(
            "threshold-loss",
            &[Matrix::from_rows(&[t_vals]).unwrap()],
            move |tape, p| threshold_loss(tape, &g2, p[0], m),
        )
        .unwrap();
        assert!(out.passed(), "max rel err {}", out.max_rel_err);
    }

    #[test]
    fn trained_thresholds_track_the_batchwise_boundary() {
        // A fixed threshold can only match the batchwise mask up to the
        // batch-to-batch wobble of the per-column top-m boundary, which
        // shrinks like 1/sqrt(batch); and plain GD at the fixed 0.01 rate is
        // only stable while boundary density x batch x lr stays small. Peaked
        // gates (scale-3 logits) at batch 128 satisfy both.
        let n = 8;
        let k = 1;
        let batch = 128;
        let m = batchwise_m(k, batch, n).0;
        let gen = |seed: u64| {
            softmax_rows(&Matrix::gaussian_seeded(batch, n, seed).scale(3.0)).unwrap()
        };
        let train: Vec<Matrix> = (0..8).map(|i| gen(1000 + i)).collect();
        let held_out: Vec<Matrix> = (0..5).map(|i| gen(2000 + i)).collect();

        let t = train_thresholds(&train, &vec![0.0; n], m, 500, 0.01).unwrap();
        let mut total = 0.0;
        for g in &held_out {
            total += mask_agreement(g, &t, m).unwrap();
        }
        let agreement = total / held_out.len() as f64;
        assert!(agreement > 0.95, "agreement {agreement}");
    }

    #[test]
    fn batchwise_forward_matches_dense_oracle_and_balances_load() {
        let mut rng = stream_rng(77, 0, 0);
        let mut params = MoeParams::init(4, 6, 3, 4, false, &mut rng);
        params.w_gate = Matrix::gaussian(4, 4, &mut rng);
        let x = Matrix::gaussian(8, 4, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let nodes = params.register(&mut tape).unwrap();
        let out = moe_forward_batchwise(&mut tape, xn, &nodes, 2, true).unwrap();

        // Exactly m rows per expert.
        let (m, exact) = batchwise_m(2, 8, 4);
        assert!(exact);
        for rows in &out.plan.assignments {
            assert_eq!(rows.len(), m);
        }
        assert_eq!(out.plan.total_rows(), 2 * 8);

        // Dense oracle over the realized masked gates.
        let gates = tape.value(out.gates).clone();
        let mut oracle = Matrix::zeros(8, 3);
        for (e, expert) in params.experts.iter().enumerate() {
            let ye = x
                .matmul(&expert.w1)
                .unwrap()
                .map(|v| v.max(0.0))
                .matmul(&expert.w2)
                .unwrap();
            for r in 0..8 {
                for c in 0..3 {
                    oracle.set(r, c, oracle.at(r, c) + gates.at(r, e) * ye.at(r, c));
                }
            }
        }
        assert!(tape.value(out.y).max_abs_diff(&oracle).unwrap() < 1e-10);
    }

    #[test]
    fn tape_free_threshold_step_matches_the_tape_path() {
        let g = random_gates(85, 12, 4);
        let t0 = vec![0.2, 0.25, 0.3, 0.1];
        let via_tape = train_thresholds(&[g.clone()], &t0, 3, 1, 0.05).unwrap();
        let mut direct = t0.clone();
        threshold_step(&g, &mut direct, 3, 0.05).unwrap();
        for (a, b) in via_tape.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!(threshold_step(&g, &mut vec![0.0; 3], 3, 0.05).is_err());
    }

    #[test]
    fn threshold_forward_agrees_with_batchwise_when_thresholds_match() {
        // Thresholds placed exactly at each column's batchwise boundary
        // (strictly between kept and dropped values) reproduce the mask, so
        // both forwards must build the same output.
        let mut rng = stream_rng(79, 0, 0);
        let mut params = MoeParams::init(4, 6, 3, 4, false, &mut rng);
        params.w_gate = Matrix::gaussian(4, 4, &mut rng);
        let x = Matrix::gaussian(8, 4, &mut rng);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let nodes = params.register(&mut tape).unwrap();
        let bw = moe_forward_batchwise(&mut tape, xn, &nodes, 2, true).unwrap();
        let dense = tape.value(bw.dense);
        let (m, _) = batchwise_m(2, 8, 4);
        let thresholds: Vec<f64> = (0..4)
            .map(|j| {
                let mut col: Vec<f64> = (0..8).map(|r| dense.at(r, j)).collect();
                col.sort_by(|a, b| b.partial_cmp(a).unwrap());
                0.5 * (col[m - 1] + col[m])
            })
            .collect();

        let mut tape2 = Tape::new();
        let xn2 = tape2.constant(x);
        let nodes2 = params.register(&mut tape2).unwrap();
        let th = moe_forward_threshold(&mut tape2, xn2, &nodes2, &thresholds, true).unwrap();
        assert_eq!(th.mask.data(), bw.mask.data());
        assert!(tape2
            .value(th.y)
            .max_abs_diff(tape.value(bw.y))
            .unwrap()
            < 1e-12);
        assert!(moe_forward_threshold(&mut tape2, xn2, &nodes2, &[0.0; 3], true).is_err());
    }

    #[test]
    fn batchwise_forward_zero_mask_row_zero_output() {
        // batch=3, n=2, k=1 -> m=1: only 2 of 3 rows can be kept anywhere,
        // so at least one row is processed by no expert and must come out 0.
        let mut rng = stream_rng(78, 0, 0);
        let mut params = MoeParams::init(3, 4, 2, 2, false, &mut rng);
        params.w_gate = Matrix::gaussian(3, 2, &mut rng);
        let x = Matrix::gaussian(3, 3, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let nodes = params.register(&mut tape).unwrap();
        let out = moe_forward_batchwise(&mut tape, xn, &nodes, 1, true).unwrap();
        let mask_row_sums: Vec<f64> = (0..3)
            .map(|r| (0..2).map(|j| out.mask.at(r, j)).sum())
            .collect();
        let zero_rows: Vec<usize> = (0..3).filter(|&r| mask_row_sums[r] == 0.0).collect();
        assert_eq!(zero_rows.len(), 1);
        for &r in &zero_rows {
            assert!(tape.value(out.y).row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masked_gate_gradients_flow_through_dense_gates() {
        let mut rng = stream_rng(79, 0, 0);
        let x = Matrix::gaussian(5, 3, &mut rng);
        let wg = Matrix::gaussian(3, 4, &mut rng);
        let mix = Matrix::gaussian(5, 4, &mut rng);
        let mask = batchwise_mask(
            &softmax_rows(&x.matmul(&wg).unwrap()).unwrap(),
            2,
        )
        .unwrap();
        let xc = x.clone();
        let out = check_gradients("masked-gate", &[wg], move |t, p| {
            let xn = t.constant(xc.clone());
            let logits = t.matmul(xn, p[0])?;
            let dense = t.softmax_rows(logits)?;
            let gates = masked_gate(t, dense, &mask)?;
            let m = t.constant(mix.clone());
            let weighted = t.mul(gates, m)?;
            Ok(t.sum(weighted))
        })
        .unwrap();
        assert!(out.passed(), "max rel err {}", out.max_rel_err);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn mask_columns_always_carry_m_ones(
            seed in 0u64..500,
            batch in 1usize..20,
            n in 1usize..7,
            m_off in 0usize..20,
        ) {
            let m = m_off % (batch + 1);
            let g = random_gates(seed, batch, n);
            let mask = batchwise_mask(&g, m).unwrap();
            for j in 0..n {
                let ones: usize = (0..batch).map(|r| mask.at(r, j) as usize).sum();
                prop_assert_eq!(ones, m);
            }
        }

        #[test]
        fn masked_rows_sum_to_one_or_zero(
            seed in 0u64..500,
            batch in 1usize..10,
            n in 2usize..6,
        ) {
            let g = random_gates(seed, batch, n);
            let mask = batchwise_mask(&g, batch.min(2)).unwrap();
            let mut tape = Tape::new();
            let gn = tape.param(g);
            let out = masked_gate(&mut tape, gn, &mask).unwrap();
            for r in 0..batch {
                let s: f64 = tape.value(out).row(r).iter().sum();
                prop_assert!(s.abs() < 1e-9 || (s - 1.0).abs() < 1e-9);
            }
        }
    }
}

