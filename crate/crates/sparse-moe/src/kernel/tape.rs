//! Tape-based reverse-mode differentiation over matrices.
//!
//! A `Tape` records each primitive operation in construction order, which is
//! already a topological order, so the backward pass is a single reverse
//! sweep. A node's gradient is therefore complete before the sweep reaches
//! it: every consumer sits later on the tape and has already contributed.
//!
//! One tape per training step. Matrices are values; nodes own their results.

use crate::error::{Error, Result};
use crate::kernel::matrix::{
    sigmoid, softmax_rows, softplus, std_normal_cdf, std_normal_pdf, Matrix,
};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Gradient-tracked leaf (parameters, test inputs).
    Leaf,
    /// Untracked leaf (data, noise samples, masks); receives no gradient.
    Const,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    NormalCdf(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ColSums(NodeId),
    RowSums(NodeId),
    /// (matrix, column vector): rows scaled elementwise by the column.
    MulCol(NodeId, NodeId),
    /// (matrix, row vector): columns scaled elementwise by the row.
    MulRow(NodeId, NodeId),
    /// (matrix, column vector): rows divided elementwise by the column.
    DivCol(NodeId, NodeId),
    /// (matrix, 1x1 scalar node).
    ScaleBy(NodeId, NodeId),
    Transpose(NodeId),
    /// Entries where the mask is false become -inf (selection stop-gradient).
    MaskNegInf(NodeId, Vec<bool>),
    /// out.flat[k] = a[coords[k]]; backward scatter-adds.
    Gather(NodeId, Vec<(usize, usize)>),
    GatherRows(NodeId, Vec<usize>),
    /// Rows placed at the given (distinct) positions of a taller zero matrix.
    ScatterRows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    /// Rows of an embedding table concatenated per window position.
    EmbedWindow {
        table: NodeId,
        ids: Vec<usize>,
        window: usize,
    },
    /// Fused relu(x . w1) . w2; the hidden activation is either retained or
    /// recomputed during backward, bit-identically.
    ExpertFf {
        x: NodeId,
        w1: NodeId,
        w2: NodeId,
        hidden: Option<Matrix>,
    },
    /// Mean cross-entropy of row-softmaxed logits against integer targets.
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Operation recorder and gradient engine.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    retained_hidden: usize,
}

/// Per-node gradients produced by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Count of matmul nodes recorded (used by op-count assertions).
    pub fn matmul_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Matmul(..)))
            .count()
    }

    /// Number of expert hidden activations currently retained by the tape.
    pub fn retained_hidden(&self) -> usize {
        self.retained_hidden
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::scalar(v))
    }

    fn binary_shape_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("mul", a, b)?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("div", a, b)?;
        let out = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn add_n(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::invalid("add_n: no terms"))?;
        let mut out = self.value(first).clone();
        for &t in &terms[1..] {
            self.binary_shape_check("add_n", first, t)?;
            out = out.add(self.value(t))?;
        }
        Ok(self.push(out, Op::AddN(terms.to_vec())))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn normal_cdf(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(std_normal_cdf);
        self.push(out, Op::NormalCdf(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).is_empty() {
            return Err(Error::invalid("mean of empty matrix"));
        }
        let out = Matrix::scalar(self.value(a).mean());
        Ok(self.push(out, Op::Mean(a)))
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).col_sums();
        self.push(out, Op::ColSums(a))
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).row_sums();
        self.push(out, Op::RowSums(a))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: self.shape(a),
                rhs: self.shape(col),
            });
        }
        let av = self.value(a);
        let cv = self.value(col);
        let out = Matrix::from_fn(av.rows(), av.cols(), |i, j| av.at(i, j) * cv.at(i, 0));
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape {
                op: "mul_row",
                lhs: self.shape(a),
                rhs: self.shape(row),
            });
        }
        let av = self.value(a);
        let rv = self.value(row);
        let out = Matrix::from_fn(av.rows(), av.cols(), |i, j| av.at(i, j) * rv.at(0, j));
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(Error::Shape {
                op: "div_col",
                lhs: self.shape(a),
                rhs: self.shape(col),
            });
        }
        let av = self.value(a);
        let cv = self.value(col);
        let out = Matrix::from_fn(av.rows(), av.cols(), |i, j| av.at(i, j) / cv.at(i, 0));
        Ok(self.push(out, Op::DivCol(a, col)))
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a),
                rhs: self.shape(s),
            });
        }
        let sv = self.value(s).at(0, 0);
        let out = self.value(a).scale(sv);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// Keep entries where `mask` is true; the rest become -inf so a following
    /// softmax maps them to exactly zero.
    pub fn mask_neg_inf(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::invalid(format!(
                "mask length {} does not match matrix of {} entries",
                mask.len(),
                av.len()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &keep)| if keep { v } else { f64::NEG_INFINITY })
            .collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::MaskNegInf(a, mask.to_vec())))
    }

    /// out laid out row-major over `coords`, with the given output shape.
    pub fn gather(
        &mut self,
        a: NodeId,
        coords: Vec<(usize, usize)>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        if coords.len() != rows * cols {
            return Err(Error::invalid("gather: coords do not fill output shape"));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in &coords {
            if r >= av.rows() || c >= av.cols() {
                return Err(Error::invalid(format!(
                    "gather: coord ({r},{c}) out of bounds for {:?}",
                    av.shape()
                )));
            }
            data.push(av.at(r, c));
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::Gather(a, coords)))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows: row {bad} out of bounds for {:?}",
                av.shape()
            )));
        }
        let out = av.gather_rows(rows);
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    /// Place rows of `a` at distinct `positions` of a `total_rows`-tall zero
    /// matrix.
    pub fn scatter_rows(&mut self, a: NodeId, positions: &[usize], total_rows: usize) -> Result<NodeId> {
        let av = self.value(a);
        if positions.len() != av.rows() {
            return Err(Error::invalid(
                "scatter_rows: one position required per input row",
            ));
        }
        let mut out = Matrix::zeros(total_rows, av.cols());
        for (r, &pos) in positions.iter().enumerate() {
            if pos >= total_rows {
                return Err(Error::invalid(format!(
                    "scatter_rows: position {pos} out of bounds for {total_rows} rows"
                )));
            }
            out.row_mut(pos).copy_from_slice(av.row(r));
        }
        Ok(self.push(out, Op::ScatterRows(a, positions.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols: no parts"))?;
        let rows = self.shape(first).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: (rows, 0),
                    rhs: pv.shape(),
                });
            }
            for i in 0..rows {
                out.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Concatenate `window` embedding rows per example: row b of the output is
    /// `[table[ids[b*window]], ..., table[ids[b*window + window-1]]]`.
    pub fn embed_window(&mut self, table: NodeId, ids: &[usize], window: usize) -> Result<NodeId> {
        if window == 0 || ids.len() % window != 0 {
            return Err(Error::invalid("embed_window: ids not a multiple of window"));
        }
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&t| t >= tv.rows()) {
            return Err(Error::invalid(format!(
                "embed_window: token id {bad} out of vocabulary ({} rows)",
                tv.rows()
            )));
        }
        let batch = ids.len() / window;
        let dim = tv.cols();
        let mut out = Matrix::zeros(batch, window * dim);
        for b in 0..batch {
            for w in 0..window {
                let src = tv.row(ids[b * window + w]);
                out.row_mut(b)[w * dim..(w + 1) * dim].copy_from_slice(src);
            }
        }
        Ok(self.push(
            out,
            Op::EmbedWindow {
                table,
                ids: ids.to_vec(),
                window,
            },
        ))
    }

    /// Fused expert feed-forward `relu(x . w1) . w2`. With `retain` false the
    /// hidden activation is dropped after the forward pass and recomputed
    /// during backward.
    pub fn expert_ff(&mut self, x: NodeId, w1: NodeId, w2: NodeId, retain: bool) -> Result<NodeId> {
        let hidden = self.value(x).matmul(self.value(w1))?.map(|v| v.max(0.0));
        let out = hidden.matmul(self.value(w2))?;
        let hidden = if retain {
            self.retained_hidden += 1;
            Some(hidden)
        } else {
            None
        };
        Ok(self.push(out, Op::ExpertFf { x, w1, w2, hidden }))
    }

    /// Mean cross-entropy over rows: `mean_b(-log softmax(logits)[b, targets[b]])`.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(Error::invalid("softmax_xent: one target per row required"));
        }
        if lv.rows() == 0 {
            return Err(Error::EmptyBatch("softmax_xent"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::invalid(format!(
                "softmax_xent: target {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let probs = softmax_rows(lv)?;
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = lv.row(b);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Matrix::scalar(total / lv.rows() as f64);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], target: NodeId, delta: Matrix) {
        if matches!(self.nodes[target.0].op, Op::Const) {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// gradient-tracked node that influences the root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward root must be 1x1, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Const) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Const => unreachable!(),
                Op::Matmul(a, b) => {
                    let da = g.matmul_nt(self.value(*b)).expect("recorded shapes");
                    let db = self.value(*a).matmul_tn(&g).expect("recorded shapes");
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b)).expect("recorded shapes");
                    let db = g.mul(self.value(*a)).expect("recorded shapes");
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = g.zip_map(bv, "div-bwd", |gv, y| gv / y).expect("shapes");
                    let db = Matrix::from_fn(bv.rows(), bv.cols(), |i2, j| {
                        -g.at(i2, j) * av.at(i2, j) / (bv.at(i2, j) * bv.at(i2, j))
                    });
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::AddN(terms) => {
                    for &t in terms {
                        self.accumulate(&mut grads, t, g.clone());
                    }
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, g.scale(*c));
                }
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let da = Matrix::from_fn(av.rows(), av.cols(), |i2, j| {
                        if av.at(i2, j) > 0.0 {
                            g.at(i2, j)
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = g.zip_map(y, "tanh-bwd", |gv, yv| gv * (1.0 - yv * yv)).unwrap();
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = g
                        .zip_map(y, "sigmoid-bwd", |gv, yv| gv * yv * (1.0 - yv))
                        .unwrap();
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    let da = g
                        .zip_map(av, "softplus-bwd", |gv, xv| gv * sigmoid(xv))
                        .unwrap();
                    self.accumulate(&mut grads, *a, da);
                }
                Op::NormalCdf(a) => {
                    let av = self.value(*a);
                    let da = g
                        .zip_map(av, "ncdf-bwd", |gv, xv| gv * std_normal_pdf(xv))
                        .unwrap();
                    self.accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let dr = da.row_mut(r);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let da = Matrix::filled(av.rows(), av.cols(), g.at(0, 0));
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let da = Matrix::filled(av.rows(), av.cols(), g.at(0, 0) / av.len() as f64);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::ColSums(a) => {
                    let av = self.value(*a);
                    let da = Matrix::from_fn(av.rows(), av.cols(), |_, j| g.at(0, j));
                    self.accumulate(&mut grads, *a, da);
                }
                Op::RowSums(a) => {
                    let av = self.value(*a);
                    let da = Matrix::from_fn(av.rows(), av.cols(), |i2, _| g.at(i2, 0));
                    self.accumulate(&mut grads, *a, da);
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let da =
                        Matrix::from_fn(av.rows(), av.cols(), |i2, j| g.at(i2, j) * cv.at(i2, 0));
                    let mut dc = Matrix::zeros(av.rows(), 1);
                    for r in 0..av.rows() {
                        let acc: f64 = g.row(r).iter().zip(av.row(r)).map(|(&gv, &a2)| gv * a2).sum();
                        dc.set(r, 0, acc);
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *col, dc);
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let rv = self.value(*row);
                    let da =
                        Matrix::from_fn(av.rows(), av.cols(), |i2, j| g.at(i2, j) * rv.at(0, j));
                    let mut dr = Matrix::zeros(1, av.cols());
                    for r in 0..av.rows() {
                        for (j, (gv, a2)) in g.row(r).iter().zip(av.row(r)).enumerate() {
                            dr.set(0, j, dr.at(0, j) + gv * a2);
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *row, dr);
                }
                Op::DivCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let da =
                        Matrix::from_fn(av.rows(), av.cols(), |i2, j| g.at(i2, j) / cv.at(i2, 0));
                    let mut dc = Matrix::zeros(av.rows(), 1);
                    for r in 0..av.rows() {
                        let c = cv.at(r, 0);
                        let acc: f64 = g.row(r).iter().zip(av.row(r)).map(|(&gv, &a2)| gv * a2).sum();
                        dc.set(r, 0, -acc / (c * c));
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *col, dc);
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.value(*s).at(0, 0);
                    let av = self.value(*a);
                    let ds: f64 = g.data().iter().zip(av.data()).map(|(&gv, &a2)| gv * a2).sum();
                    self.accumulate(&mut grads, *a, g.scale(sv));
                    self.accumulate(&mut grads, *s, Matrix::scalar(ds));
                }
                Op::Transpose(a) => {
                    self.accumulate(&mut grads, *a, g.transpose());
                }
                Op::MaskNegInf(a, mask) => {
                    let av = self.value(*a);
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(&gv, &keep)| if keep { gv } else { 0.0 })
                        .collect();
                    let da = Matrix::from_vec(av.rows(), av.cols(), data).unwrap();
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Gather(a, coords) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (k, &(r, c)) in coords.iter().enumerate() {
                        da.set(r, c, da.at(r, c) + g.data()[k]);
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::GatherRows(a, rows) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (r, &src) in rows.iter().enumerate() {
                        for (d, &gv) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::ScatterRows(a, positions) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (r, &pos) in positions.iter().enumerate() {
                        da.row_mut(r).copy_from_slice(g.row(pos));
                    }
                    self.accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + pv.cols()]);
                        }
                        offset += pv.cols();
                        self.accumulate(&mut grads, p, dp);
                    }
                }
                Op::EmbedWindow { table, ids, window } => {
                    let tv = self.value(*table);
                    let dim = tv.cols();
                    let mut dt = Matrix::zeros(tv.rows(), dim);
                    let batch = ids.len() / window;
                    for b in 0..batch {
                        for w in 0..*window {
                            let id = ids[b * window + w];
                            let gslice = &g.row(b)[w * dim..(w + 1) * dim];
                            for (d, &gv) in dt.row_mut(id).iter_mut().zip(gslice) {
                                *d += gv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *table, dt);
                }
                Op::ExpertFf { x, w1, w2, hidden } => {
                    let xv = self.value(*x);
                    let w1v = self.value(*w1);
                    let w2v = self.value(*w2);
                    let recomputed;
                    let h = match hidden {
                        Some(h) => h,
                        None => {
                            recomputed = xv.matmul(w1v).expect("recorded shapes").map(|v| v.max(0.0));
                            &recomputed
                        }
                    };
                    let dw2 = h.matmul_tn(&g).expect("shapes");
                    let dh = g.matmul_nt(w2v).expect("shapes");
                    let dpre = Matrix::from_fn(h.rows(), h.cols(), |i2, j| {
                        if h.at(i2, j) > 0.0 {
                            dh.at(i2, j)
                        } else {
                            0.0
                        }
                    });
                    let dw1 = xv.matmul_tn(&dpre).expect("shapes");
                    let dx = dpre.matmul_nt(w1v).expect("shapes");
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w1, dw1);
                    self.accumulate(&mut grads, *w2, dw2);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.at(0, 0) / targets.len() as f64;
                    let mut dl = probs.scale(scale);
                    for (b, &t) in targets.iter().enumerate() {
                        dl.set(b, t, dl.at(b, t) - scale);
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
