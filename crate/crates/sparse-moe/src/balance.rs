//! Importance and load balancing losses.
//!
//! The gate left to itself collapses onto a few favorite experts, because
//! favored experts train faster and get favored harder. Two auxiliary losses
//! fight that: `importance_loss` penalizes imbalance in total gate mass per
//! expert, and `load_loss` penalizes imbalance in the expected *count* of
//! examples per expert, using a smooth per-example selection probability so
//! the discrete routing still yields a gradient.
//!
//! For expert i the selection probability under a fresh draw of its own
//! noise, keeping every other component's already-sampled noise, is
//!
//! ```text
//! P(x, i) = Phi(((x.Wg)_i - kth_excluding(H(x), k, i)) / softplus((x.Wn)_i))
//! ```
//!
//! where `kth_excluding(v, k, i)` is the k-th highest component of v with
//! component i removed. Load(X)_i sums P over the batch.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::gating::{top_k_indices, GateResult};
use crate::kernel::{std_normal_cdf, Matrix, NodeId, Tape};

static ZERO_CV_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Times cv_squared hit an all-zero vector and took the defined-limit 0.
pub fn zero_cv_warnings() -> u64 {
    ZERO_CV_WARNINGS.load(Ordering::Relaxed)
}

/// Per-expert total gate mass: column sums of the gate matrix.
pub fn importance_vec(gates: &Matrix) -> Result<Vec<f64>> {
    if gates.rows() == 0 {
        return Err(Error::EmptyBatch("importance"));
    }
    Ok(gates.col_sums().data().to_vec())
}

/// Squared coefficient of variation with population standard deviation.
/// All-equal and length-1 vectors give 0; the all-zero vector gives 0 by
/// defined limit and bumps the warning counter.
pub fn cv_squared(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    if v.iter().all(|&x| x == 0.0) {
        ZERO_CV_WARNINGS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var / (mean * mean)
}

/// Tape version of `cv_squared` for non-negative vectors, via
/// `mean(v^2)/mean(v)^2 - 1` rearranged to keep one division.
pub fn cv_squared_node(tape: &mut Tape, v: NodeId) -> Result<NodeId> {
    if tape.value(v).data().iter().all(|&x| x == 0.0) {
        ZERO_CV_WARNINGS.fetch_add(1, Ordering::Relaxed);
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let m = tape.mean(v)?;
    let sq = tape.mul(v, v)?;
    let m2 = tape.mean(sq)?;
    let mm = tape.mul(m, m)?;
    let var = tape.sub(m2, mm)?;
    tape.div(var, mm)
}

/// `w * CV(Importance(X))^2`, differentiable through the gates.
pub fn importance_loss(tape: &mut Tape, gates: NodeId, w_importance: f64) -> Result<NodeId> {
    if tape.shape(gates).0 == 0 {
        return Err(Error::EmptyBatch("importance"));
    }
    let imp = tape.col_sums(gates);
    let cv2 = cv_squared_node(tape, imp)?;
    Ok(tape.scale(cv2, w_importance))
}

/// k-th highest component of `v` excluding component `i`, ties resolved by
/// lower index, consistent with the gate's selection order.
pub fn kth_excluding(v: &[f64], k: usize, i: usize) -> f64 {
    debug_assert!(k < v.len());
    let order = top_k_indices(v, v.len());
    let mut seen = 0;
    for &j in &order {
        if j == i {
            continue;
        }
        seen += 1;
        if seen == k {
            return v[j];
        }
    }
    unreachable!("k < len guarantees a k-th element exists");
}

/// Probability that expert `i` stays selected when its own noise is redrawn
/// and every other component keeps its sampled value. With k >= n selection
/// is certain.
pub fn prob_nonzero(clean: &[f64], noisy: &[f64], stddev: &[f64], k: usize, i: usize) -> f64 {
    if k >= clean.len() {
        return 1.0;
    }
    let threshold = kth_excluding(noisy, k, i);
    std_normal_cdf((clean[i] - threshold) / stddev[i])
}

/// Threshold index per (row, expert): position of the component whose value
/// is `kth_excluding(noisy_row, k, i)`.
fn threshold_index(order: &[usize], k: usize, i: usize) -> usize {
    // i inside the top k shifts the k-th-excluding-i to the (k+1)-th overall.
    if order[..k].contains(&i) {
        order[k]
    } else {
        order[k - 1]
    }
}

/// Smooth per-expert load (1 x n), differentiable in the gating weights
/// through the margin, the threshold, and the noise scale.
pub fn load_node(tape: &mut Tape, gate: &GateResult) -> Result<NodeId> {
    let (batch, n) = tape.shape(gate.gates);
    if batch == 0 {
        return Err(Error::EmptyBatch("load"));
    }
    let stddev = gate.stddev.ok_or(Error::LoadRequiresNoise)?;
    let k = gate.top_k[0].len();
    if k >= n {
        // Selection is certain for every expert; the estimator is the batch
        // size, a constant.
        return Ok(tape.constant(Matrix::filled(1, n, batch as f64)));
    }
    let noisy_vals = tape.value(gate.noisy);
    let mut coords = Vec::with_capacity(batch * n);
    for r in 0..batch {
        let order = top_k_indices(noisy_vals.row(r), n);
        for i in 0..n {
            coords.push((r, threshold_index(&order, k, i)));
        }
    }
    let thresholds = tape.gather(gate.noisy, coords, batch, n)?;
    let margin = tape.sub(gate.clean, thresholds)?;
    let standardized = tape.div(margin, stddev)?;
    let p = tape.normal_cdf(standardized);
    Ok(tape.col_sums(p))
}

/// `w * CV(Load(X))^2`.
pub fn load_loss(tape: &mut Tape, gate: &GateResult, w_load: f64) -> Result<NodeId> {
    let load = load_node(tape, gate)?;
    let cv2 = cv_squared_node(tape, load)?;
    Ok(tape.scale(cv2, w_load))
}

/// Off-tape snapshot of the balance statistics for reporting.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
    pub cv_importance: f64,
    pub cv_load: f64,
    pub max_over_mean_load: f64,
}

impl BalanceReport {
    pub fn new(importance: Vec<f64>, load: Vec<f64>) -> Self {
        let cv_importance = cv_squared(&importance).sqrt();
        let cv_load = cv_squared(&load).sqrt();
        let mean = load.iter().sum::<f64>() / load.len().max(1) as f64;
        let max = load.iter().copied().fold(0.0_f64, f64::max);
        let max_over_mean_load = if mean > 0.0 { max / mean } else { 0.0 };
        BalanceReport {
            importance,
            load,
            cv_importance,
            cv_load,
            max_over_mean_load,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{min_top_k_margin, noisy_top_k_gate, GateNoise};
    use crate::gradcheck::check_gradients;
    use crate::kernel::{softplus, stream_rng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn importance_of_uniform_gates() {
        let gates = Matrix::filled(2, 4, 0.25);
        assert_eq!(importance_vec(&gates).unwrap(), vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn importance_of_concentrated_gates() {
        let mut gates = Matrix::zeros(3, 4);
        for r in 0..3 {
            gates.set(r, 0, 1.0);
        }
        assert_eq!(importance_vec(&gates).unwrap(), vec![3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn importance_rejects_empty_batch() {
        assert!(importance_vec(&Matrix::zeros(0, 4)).is_err());
        let mut tape = Tape::new();
        let g = tape.constant(Matrix::zeros(0, 4));
        assert!(importance_loss(&mut tape, g, 0.1).is_err());
    }

    #[test]
    fn importance_sums_to_batch() {
        let mut rng = stream_rng(50, 0, 0);
        for batch in [1usize, 7, 33] {
            let logits = Matrix::gaussian(batch, 6, &mut rng);
            let gates = crate::kernel::softmax_rows(&logits).unwrap();
            let total: f64 = importance_vec(&gates).unwrap().iter().sum();
            assert_abs_diff_eq!(total, batch as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn cv_squared_hand_values() {
        assert_eq!(cv_squared(&[5.0, 5.0, 5.0, 5.0]), 0.0);
        assert_abs_diff_eq!(cv_squared(&[1.0, 3.0]), 0.25, epsilon = 1e-15);
        assert_eq!(cv_squared(&[42.0]), 0.0);
    }

    #[test]
    fn cv_squared_zero_vector_is_zero_with_warning() {
        let before = zero_cv_warnings();
        assert_eq!(cv_squared(&[0.0, 0.0, 0.0]), 0.0);
        assert!(zero_cv_warnings() >= before + 1);
    }

    #[test]
    fn cv_squared_node_matches_plain() {
        let mut rng = stream_rng(51, 0, 0);
        for _ in 0..10 {
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..5.0)).collect();
            let mut tape = Tape::new();
            let node = tape.param(Matrix::from_rows(&[v.clone()]).unwrap());
            let cv2 = cv_squared_node(&mut tape, node).unwrap();
            assert_abs_diff_eq!(tape.value(cv2).at(0, 0), cv_squared(&v), epsilon = 1e-12);
        }
    }

    #[test]
    fn importance_loss_balanced_and_unweighted_are_zero() {
        let mut tape = Tape::new();
        let g = tape.param(Matrix::filled(4, 4, 0.25));
        let balanced = importance_loss(&mut tape, g, 0.1).unwrap();
        assert_eq!(tape.value(balanced).at(0, 0), 0.0);

        let skew = tape.param(crate::kernel::softmax_rows(&Matrix::gaussian_seeded(4, 4, 3)).unwrap());
        let unweighted = importance_loss(&mut tape, skew, 0.0).unwrap();
        assert_eq!(tape.value(unweighted).at(0, 0), 0.0);
    }

    #[test]
    fn kth_excluding_hand_cases() {
        let v = [5.0, 1.0, 4.0, 2.0];
        // Excluding the max, the 1st highest is 4.0.
        assert_eq!(kth_excluding(&v, 1, 0), 4.0);
        // Excluding a low entry keeps the overall order.
        assert_eq!(kth_excluding(&v, 1, 1), 5.0);
        assert_eq!(kth_excluding(&v, 2, 1), 4.0);
        assert_eq!(kth_excluding(&v, 3, 0), 1.0);
        // Ties: equal values rank by index.
        let t = [2.0, 2.0, 2.0];
        assert_eq!(kth_excluding(&t, 1, 0), 2.0);
    }

    #[test]
    fn prob_nonzero_symmetric_pair_is_half() {
        let clean = [1.3, 1.3];
        let noisy = [1.3, 1.3];
        let stddev = [0.7, 0.7];
        assert_abs_diff_eq!(prob_nonzero(&clean, &noisy, &stddev, 1, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(prob_nonzero(&clean, &noisy, &stddev, 1, 1), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn prob_nonzero_saturates_with_wide_margin() {
        let clean = [8.0, 0.0];
        let noisy = [8.0, 0.0];
        let stddev = [1.0, 1.0];
        assert!(prob_nonzero(&clean, &noisy, &stddev, 1, 0) > 1.0 - 1e-10);
    }

    #[test]
    fn prob_nonzero_certain_when_k_covers_all() {
        assert_eq!(prob_nonzero(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 1.0], 2, 0), 1.0);
    }

    #[test]
    fn prob_nonzero_matches_monte_carlo_resampling() {
        let n = 4;
        let k = 2;
        let trials = 50_000;
        for cfg in 0..2u64 {
            let mut rng = stream_rng(52, cfg, 0);
            let clean: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let stddev: Vec<f64> = (0..n).map(|_| softplus(rng.gen_range(-1.0..1.0))).collect();
            let eps: Vec<f64> = (0..n).map(|_| Matrix::gaussian(1, 1, &mut rng).at(0, 0)).collect();
            let noisy: Vec<f64> = (0..n).map(|j| clean[j] + stddev[j] * eps[j]).collect();
            for i in 0..n {
                let p = prob_nonzero(&clean, &noisy, &stddev, k, i);
                let mut hits = 0usize;
                let mut mc = stream_rng(52, cfg, (i + 1) as u64);
                for _ in 0..trials {
                    let fresh = Matrix::gaussian(1, 1, &mut mc).at(0, 0);
                    let mut h = noisy.clone();
                    h[i] = clean[i] + stddev[i] * fresh;
                    if top_k_indices(&h, k).contains(&i) {
                        hits += 1;
                    }
                }
                let freq = hits as f64 / trials as f64;
                let sigma = (p * (1.0 - p) / trials as f64).sqrt();
                assert!(
                    (freq - p).abs() <= 3.0 * sigma + 1e-9,
                    "cfg {cfg} expert {i}: p={p} freq={freq} sigma={sigma}"
                );
            }
        }
    }

    fn gate_on_tape<'a>(
        tape: &mut Tape,
        x: &Matrix,
        wg: &Matrix,
        wn: &Matrix,
        k: usize,
        eps: &'a Matrix,
    ) -> GateResult {
        let xn = tape.constant(x.clone());
        let wgn = tape.param(wg.clone());
        let wnn = tape.param(wn.clone());
        noisy_top_k_gate(tape, xn, wgn, wnn, k, GateNoise::Fixed(eps)).unwrap()
    }

    #[test]
    fn load_node_agrees_with_prob_nonzero_sum() {
        let mut rng = stream_rng(53, 0, 0);
        let x = Matrix::gaussian(6, 4, &mut rng);
        let wg = Matrix::gaussian(4, 5, &mut rng);
        let wn = Matrix::gaussian(4, 5, &mut rng).scale(0.5);
        let eps = Matrix::gaussian(6, 5, &mut rng);
        let mut tape = Tape::new();
        let gate = gate_on_tape(&mut tape, &x, &wg, &wn, 2, &eps);
        let load = load_node(&mut tape, &gate).unwrap();

        let clean = tape.value(gate.clean).clone();
        let noisy = tape.value(gate.noisy).clone();
        let stddev = tape.value(gate.stddev.unwrap()).clone();
        for i in 0..5 {
            let expect: f64 = (0..6)
                .map(|r| prob_nonzero(clean.row(r), noisy.row(r), stddev.row(r), 2, i))
                .sum();
            assert_abs_diff_eq!(tape.value(load).at(0, i), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn load_requires_noise() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::gaussian_seeded(3, 4, 9));
        let wg = tape.param(Matrix::gaussian_seeded(4, 5, 10));
        let wn = tape.param(Matrix::zeros(4, 5));
        let gate = noisy_top_k_gate(&mut tape, x, wg, wn, 2, GateNoise::Off).unwrap();
        assert!(matches!(
            load_node(&mut tape, &gate),
            Err(Error::LoadRequiresNoise)
        ));
    }

    #[test]
    fn load_with_k_covering_all_is_batch_per_expert() {
        let mut rng = stream_rng(54, 0, 0);
        let x = Matrix::gaussian(7, 3, &mut rng);
        let wg = Matrix::gaussian(3, 4, &mut rng);
        let wn = Matrix::gaussian(3, 4, &mut rng);
        let eps = Matrix::gaussian(7, 4, &mut rng);
        let mut tape = Tape::new();
        let gate = gate_on_tape(&mut tape, &x, &wg, &wn, 4, &eps);
        let load = load_node(&mut tape, &gate).unwrap();
        assert_eq!(tape.value(load).data(), &[7.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn symmetric_zero_init_load_is_near_uniform() {
        // Zero gate weights: every expert is exchangeable, so expected load
        // is batch*k/n. Single-draw deviation at batch 512 stays under 2%.
        let batch = 512;
        let (n, k) = (4usize, 2usize);
        let mut rng = stream_rng(55, 0, 0);
        let x = Matrix::gaussian(batch, 8, &mut rng);
        let wg = Matrix::zeros(8, n);
        let wn = Matrix::zeros(8, n);
        let eps = Matrix::gaussian(batch, n, &mut stream_rng(55, 1, 6));
        let mut tape = Tape::new();
        let gate = gate_on_tape(&mut tape, &x, &wg, &wn, k, &eps);
        let load = load_node(&mut tape, &gate).unwrap();
        let expected = batch as f64 * k as f64 / n as f64;
        for i in 0..n {
            let rel = (tape.value(load).at(0, i) - expected).abs() / expected;
            assert!(rel < 0.02, "expert {i}: load {} vs {expected}", tape.value(load).at(0, i));
        }
        let loss = load_loss(&mut tape, &gate, 0.1).unwrap();
        assert!(tape.value(loss).at(0, 0) < 1e-3, "{}", tape.value(loss).at(0, 0));
    }

    #[test]
    fn load_loss_unweighted_is_zero() {
        let mut rng = stream_rng(56, 0, 0);
        let x = Matrix::gaussian(4, 3, &mut rng);
        let wg = Matrix::gaussian(3, 4, &mut rng);
        let wn = Matrix::gaussian(3, 4, &mut rng);
        let eps = Matrix::gaussian(4, 4, &mut rng);
        let mut tape = Tape::new();
        let gate = gate_on_tape(&mut tape, &x, &wg, &wn, 2, &eps);
        let loss = load_loss(&mut tape, &gate, 0.0).unwrap();
        assert_eq!(tape.value(loss).at(0, 0), 0.0);
    }

    #[test]
    fn boosted_expert_raises_loss_and_gradient_pushes_back() {
        // Give expert 0 a big clean-logit head start via the gate weights;
        // the load loss must be positive and its gradient on the boosting
        // weight positive, so a descent step shrinks the boost.
        let batch = 64;
        let mut rng = stream_rng(57, 0, 0);
        let mut x = Matrix::zeros(batch, 3);
        for r in 0..batch {
            x.set(r, 0, 1.0);
            x.set(r, 1, Matrix::gaussian(1, 1, &mut rng).at(0, 0));
            x.set(r, 2, Matrix::gaussian(1, 1, &mut rng).at(0, 0));
        }
        let mut wg = Matrix::zeros(3, 4);
        wg.set(0, 0, 2.0);
        let wn = Matrix::zeros(3, 4);
        let eps = Matrix::gaussian(batch, 4, &mut stream_rng(57, 1, 0));

        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let wgn = tape.param(wg);
        let wnn = tape.param(wn);
        let gate =
            noisy_top_k_gate(&mut tape, xn, wgn, wnn, 2, GateNoise::Fixed(&eps)).unwrap();
        let loss = load_loss(&mut tape, &gate, 0.1).unwrap();
        assert!(tape.value(loss).at(0, 0) > 1e-4);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(wgn).unwrap().at(0, 0) > 0.0);
    }

    #[test]
    fn balance_losses_match_finite_differences() {
        let mut rng = stream_rng(58, 0, 0);
        let x = Matrix::gaussian(5, 3, &mut rng);
        let wg = Matrix::gaussian(3, 4, &mut rng);
        let wn = Matrix::gaussian(3, 4, &mut rng).scale(0.4);
        let eps = Matrix::gaussian(5, 4, &mut rng);

        {
            let mut tape = Tape::new();
            let gate = gate_on_tape(&mut tape, &x, &wg, &wn, 2, &eps);
            let margin = min_top_k_margin(tape.value(gate.noisy), 2);
            assert!(margin > 1e-2, "unstable selection for this seed: {margin}");
        }

        let eps_imp = eps.clone();
        let imp = check_gradients("importance-loss", &[x.clone(), wg.clone(), wn.clone()], move |t, p| {
            let g = noisy_top_k_gate(t, p[0], p[1], p[2], 2, GateNoise::Fixed(&eps_imp))?;
            importance_loss(t, g.gates, 0.1)
        })
        .unwrap();
        assert!(imp.passed(), "importance max rel err {}", imp.max_rel_err);

        let eps_load = eps.clone();
        let load = check_gradients("load-loss", &[x, wg, wn], move |t, p| {
            let g = noisy_top_k_gate(t, p[0], p[1], p[2], 2, GateNoise::Fixed(&eps_load))?;
            load_loss(t, &g, 0.1)
        })
        .unwrap();
        assert!(load.passed(), "load max rel err {}", load.max_rel_err);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn cv_squared_scale_and_permutation_invariant(
            v in proptest::collection::vec(0.01f64..10.0, 1..12),
            c in 0.01f64..100.0,
            rot in 0usize..12,
        ) {
            let base = cv_squared(&v);
            let scaled: Vec<f64> = v.iter().map(|&x| c * x).collect();
            prop_assert!((cv_squared(&scaled) - base).abs() < 1e-9);
            let mut rotated = v.clone();
            rotated.rotate_left(rot % v.len());
            prop_assert!((cv_squared(&rotated) - base).abs() < 1e-12);
        }

        #[test]
        fn prob_nonzero_in_unit_interval_and_monotone(
            seed in 0u64..500,
            bump in 0.01f64..3.0,
        ) {
            let mut rng = stream_rng(seed, 6, 0);
            let n = 5;
            let clean: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let stddev: Vec<f64> = (0..n).map(|_| softplus(rng.gen_range(-1.0..1.0))).collect();
            let noisy: Vec<f64> = (0..n).map(|j| clean[j] + stddev[j] * rng.gen_range(-2.0..2.0)).collect();
            for i in 0..n {
                let p = prob_nonzero(&clean, &noisy, &stddev, 2, i);
                prop_assert!((0.0..=1.0).contains(&p));
                let mut boosted = clean.clone();
                boosted[i] += bump;
                let p2 = prob_nonzero(&boosted, &noisy, &stddev, 2, i);
                prop_assert!(p2 >= p);
            }
        }
    }
}

