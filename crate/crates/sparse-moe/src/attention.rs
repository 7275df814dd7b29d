//! Two attention scoring functions and a batched form of the second.
//!
//! The additive form squashes the sum of the two projections, so a score
//! matrix over all source/target pairs cannot be assembled from per-side
//! precomputations. The factored form applies tanh to each side separately
//! and mixes them bilinearly, which is exactly what lets a full S x T score
//! matrix fall out of two projections and one product. Both are exposed as
//! pure scalar functions and as tape operations with exact gradients.

use crate::error::{Error, Result};
use crate::kernel::{Matrix, NodeId, Tape};

/// Weights for one attention function: two projections into the attention
/// space and a mixing vector over its dimensions.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// src_dim x n_att.
    pub u: Matrix,
    /// tgt_dim x n_att.
    pub w: Matrix,
    /// Length n_att.
    pub v: Vec<f64>,
}

/// Tape handles for registered attention weights. `v` is a 1 x n_att row.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub u: NodeId,
    pub w: NodeId,
    pub v: NodeId,
}

impl AttentionParams {
    pub fn new(u: Matrix, w: Matrix, v: Vec<f64>) -> Result<Self> {
        if u.cols() != v.len() || w.cols() != v.len() {
            return Err(Error::Shape {
                op: "attention_params",
                lhs: (u.cols(), w.cols()),
                rhs: (v.len(), v.len()),
            });
        }
        Ok(AttentionParams { u, w, v })
    }

    pub fn n_att(&self) -> usize {
        self.v.len()
    }

    /// Register all three weights as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> Result<AttentionNodes> {
        let u = tape.param(self.u.clone());
        let w = tape.param(self.w.clone());
        let v = tape.param(Matrix::from_vec(1, self.v.len(), self.v.clone())?);
        Ok(AttentionNodes { u, w, v })
    }

    fn check_pair(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.u.rows() || y.len() != self.w.rows() {
            return Err(Error::Shape {
                op: "attention_score",
                lhs: (x.len(), y.len()),
                rhs: (self.u.rows(), self.w.rows()),
            });
        }
        Ok(())
    }
}

fn project(x: &[f64], m: &Matrix, d: usize) -> f64 {
    x.iter().enumerate().map(|(s, &xv)| xv * m.at(s, d)).sum()
}

/// Additive score: sum_d V_d tanh((xU)_d + (yW)_d).
pub fn attention_gnmt(x: &[f64], y: &[f64], p: &AttentionParams) -> Result<f64> {
    p.check_pair(x, y)?;
    Ok((0..p.n_att())
        .map(|d| p.v[d] * (project(x, &p.u, d) + project(y, &p.w, d)).tanh())
        .sum())
}

/// Factored score: sum_d V_d tanh((xU)_d) tanh((yW)_d).
pub fn attention_factored(x: &[f64], y: &[f64], p: &AttentionParams) -> Result<f64> {
    p.check_pair(x, y)?;
    Ok((0..p.n_att())
        .map(|d| p.v[d] * project(x, &p.u, d).tanh() * project(y, &p.w, d).tanh())
        .sum())
}

/// Additive scores for row-aligned pairs: S x src_dim against S x tgt_dim
/// gives an S x 1 column of scores. The sum inside the tanh ties the two
/// sides together, so only aligned pairs are batchable for this form.
pub fn attention_gnmt_pairs(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    nodes: AttentionNodes,
) -> Result<NodeId> {
    let xu = tape.matmul(x, nodes.u)?;
    let yw = tape.matmul(y, nodes.w)?;
    let joint = tape.add(xu, yw)?;
    let squashed = tape.tanh(joint);
    let mixed = tape.mul_row(squashed, nodes.v)?;
    Ok(tape.row_sums(mixed))
}

/// Factored scores for all pairs: S x src_dim against T x tgt_dim gives the
/// full S x T score matrix as (tanh(XU) diag(V)) tanh(YW)^T. Two projection
/// matmuls and one mixing product, independent of S and T.
pub fn attention_factored_batched(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    nodes: AttentionNodes,
) -> Result<NodeId> {
    let xu = tape.matmul(x, nodes.u)?;
    let a = tape.tanh(xu);
    let av = tape.mul_row(a, nodes.v)?;
    let yw = tape.matmul(y, nodes.w)?;
    let b = tape.tanh(yw);
    let bt = tape.transpose(b);
    tape.matmul(av, bt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::kernel::stream_rng;
    use rand::Rng;

    fn random_params(src: usize, tgt: usize, n_att: usize, seed: u64) -> AttentionParams {
        let mut rng = stream_rng(95, 0, seed);
        AttentionParams::new(
            Matrix::from_fn(src, n_att, |_, _| rng.gen_range(-1.0..1.0)),
            Matrix::from_fn(tgt, n_att, |_, _| rng.gen_range(-1.0..1.0)),
            (0..n_att).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(95, 1, seed);
        (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn zero_mixing_vector_scores_zero() {
        let mut p = random_params(3, 4, 5, 0);
        p.v = vec![0.0; 5];
        let x = random_vec(3, 0);
        let y = random_vec(4, 1);
        assert_eq!(attention_gnmt(&x, &y, &p).unwrap(), 0.0);
        assert_eq!(attention_factored(&x, &y, &p).unwrap(), 0.0);
    }

    #[test]
    fn opposed_inputs_cancel_inside_the_additive_form() {
        let p = AttentionParams::new(
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        assert_eq!(attention_gnmt(&[0.7], &[-0.7], &p).unwrap(), 0.0);
    }

    #[test]
    fn scalar_scores_match_a_matrix_algebra_oracle() {
        for seed in 0..10 {
            let p = random_params(3, 5, 4, seed);
            let x = random_vec(3, 10 + seed);
            let y = random_vec(5, 20 + seed);
            let xu = Matrix::from_vec(1, 3, x.clone())
                .unwrap()
                .matmul(&p.u)
                .unwrap();
            let yw = Matrix::from_vec(1, 5, y.clone())
                .unwrap()
                .matmul(&p.w)
                .unwrap();
            let gnmt: f64 = (0..4)
                .map(|d| p.v[d] * (xu.at(0, d) + yw.at(0, d)).tanh())
                .sum();
            let fact: f64 = (0..4)
                .map(|d| p.v[d] * xu.at(0, d).tanh() * yw.at(0, d).tanh())
                .sum();
            assert!((attention_gnmt(&x, &y, &p).unwrap() - gnmt).abs() < 1e-12);
            assert!((attention_factored(&x, &y, &p).unwrap() - fact).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_scores_match_the_scalar_function_entrywise() {
        let p = random_params(3, 4, 6, 7);
        let mut rng = stream_rng(95, 2, 0);
        let xs = Matrix::from_fn(3, 3, |_, _| rng.gen_range(-1.5..1.5));
        let ys = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.5..1.5));
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone());
        let y = tape.constant(ys.clone());
        let nodes = p.register(&mut tape).unwrap();
        let scores = attention_factored_batched(&mut tape, x, y, nodes).unwrap();
        assert_eq!(tape.shape(scores), (3, 4));
        for i in 0..3 {
            for j in 0..4 {
                let scalar = attention_factored(xs.row(i), ys.row(j), &p).unwrap();
                assert!((tape.value(scores).at(i, j) - scalar).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_pair_batch_reduces_to_the_scalar_op() {
        let p = random_params(2, 2, 3, 8);
        let xs = Matrix::from_vec(1, 2, random_vec(2, 30)).unwrap();
        let ys = Matrix::from_vec(1, 2, random_vec(2, 31)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone());
        let y = tape.constant(ys.clone());
        let nodes = p.register(&mut tape).unwrap();
        let scores = attention_factored_batched(&mut tape, x, y, nodes).unwrap();
        let scalar = attention_factored(xs.row(0), ys.row(0), &p).unwrap();
        assert!((tape.value(scores).at(0, 0) - scalar).abs() < 1e-15);
    }

    #[test]
    fn batched_path_costs_three_matmuls_regardless_of_pair_count() {
        for (s_rows, t_rows) in [(2, 2), (5, 7)] {
            let p = random_params(3, 4, 6, 9);
            let mut rng = stream_rng(95, 3, 0);
            let xs = Matrix::from_fn(s_rows, 3, |_, _| rng.gen_range(-1.0..1.0));
            let ys = Matrix::from_fn(t_rows, 4, |_, _| rng.gen_range(-1.0..1.0));
            let mut tape = Tape::new();
            let x = tape.constant(xs);
            let y = tape.constant(ys);
            let nodes = p.register(&mut tape).unwrap();
            attention_factored_batched(&mut tape, x, y, nodes).unwrap();
            assert_eq!(tape.matmul_count(), 3);
        }
    }

    #[test]
    fn the_additive_form_does_not_factor() {
        // tanh(a + b) != tanh(a) tanh(b): one attention dimension with unit
        // weights and x = y = 1 separates the two forms by 0.38.
        let p = AttentionParams::new(
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let gnmt = attention_gnmt(&[1.0], &[1.0], &p).unwrap();
        let fact = attention_factored(&[1.0], &[1.0], &p).unwrap();
        assert!((gnmt - fact).abs() > 0.1, "gnmt {gnmt} vs factored {fact}");
        // And generically: most random instances separate them too.
        let mut separated = 0;
        for seed in 0..20 {
            let p = random_params(3, 4, 5, 100 + seed);
            let x = random_vec(3, 200 + seed);
            let y = random_vec(4, 300 + seed);
            let g = attention_gnmt(&x, &y, &p).unwrap();
            let f = attention_factored(&x, &y, &p).unwrap();
            if (g - f).abs() > 0.1 {
                separated += 1;
            }
        }
        assert!(separated >= 10, "only {separated}/20 instances separated");
    }

    #[test]
    fn mismatched_input_lengths_are_rejected() {
        let p = random_params(3, 4, 5, 11);
        assert!(attention_gnmt(&[1.0, 2.0], &random_vec(4, 40), &p).is_err());
        assert!(attention_factored(&random_vec(3, 41), &[1.0], &p).is_err());
        assert!(AttentionParams::new(Matrix::zeros(3, 2), Matrix::zeros(4, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn both_forms_pass_finite_difference_checks() {
        let p = random_params(3, 4, 5, 12);
        let mut rng = stream_rng(95, 4, 1);
        let xs = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let ys_aligned = Matrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let ys_cross = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));

        let params = vec![
            p.u.clone(),
            p.w.clone(),
            Matrix::from_vec(1, 5, p.v.clone()).unwrap(),
        ];
        let xs_g = xs.clone();
        let ys_g = ys_aligned;
        let gnmt = check_gradients("attention_gnmt_pairs", &params, move |tape, ids| {
            let x = tape.constant(xs_g.clone());
            let y = tape.constant(ys_g.clone());
            let nodes = AttentionNodes {
                u: ids[0],
                w: ids[1],
                v: ids[2],
            };
            let scores = attention_gnmt_pairs(tape, x, y, nodes)?;
            Ok(tape.sum(scores))
        })
        .unwrap();
        assert!(gnmt.passed(), "{gnmt:?}");

        let fact = check_gradients("attention_factored_batched", &params, move |tape, ids| {
            let x = tape.constant(xs.clone());
            let y = tape.constant(ys_cross.clone());
            let nodes = AttentionNodes {
                u: ids[0],
                w: ids[1],
                v: ids[2],
            };
            let scores = attention_factored_batched(tape, x, y, nodes)?;
            Ok(tape.sum(scores))
        })
        .unwrap();
        assert!(fact.passed(), "{fact:?}");
    }
}
