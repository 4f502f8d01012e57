//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Adjoints of leaves created with [`Graph::param`] accumulate across
//! backward calls until [`Graph::zero_grad`] clears them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to every probability that enters a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogClamped(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Gather(Var, Vec<(usize, usize)>),
    PairwiseSqDist(Var),
    GradReverse(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "mul_scalar",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::LogClamped(..) => "log",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Gather(..) => "gather",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::GradReverse(..) => "grad_reverse",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Persistent adjoint, only kept for `param` leaves.
    adjoint: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("constant")?;
        Ok(self.push_raw(value, Op::Leaf, false))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("param")?;
        let adjoint = Some(Tensor::zeros(value.rows(), value.cols()));
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            adjoint,
        });
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Accumulated adjoint of a `param` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].adjoint.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(adj) = node.adjoint.as_mut() {
                adj.data_mut().iter_mut().for_each(|a| *a = 0.0);
            }
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            adjoint: None,
        });
        v
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} output", op.name())));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    ta.rows(),
                    ta.cols(),
                    tb.rows(),
                    tb.cols()
                ),
            ));
        }
        let out = ta.matmul_raw(tb);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a 1xn row to every row of an mxn tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} plus row {:?}", tx.shape(), tr.shape()),
            ));
        }
        let cols = tx.cols();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % cols];
        }
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x), &[x])
    }

    /// Natural log of inputs clamped to `[PROB_FLOOR, 1]`.
    pub fn log_prob(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(PROB_FLOOR, 1.0).ln());
        self.push(out, Op::LogClamped(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut out = tx.clone();
        let cols = tx.cols();
        for r in 0..tx.rows() {
            let lse = log_sum_exp(tx.row(r));
            for c in 0..cols {
                out.data_mut()[r * cols + c] -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Per-row sums, as an mx1 column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.row_iter().map(|r| r.iter().sum()).collect();
        let out = Tensor::new(t.rows(), 1, data)?;
        self.push(out, Op::SumCols(x), &[x])
    }

    /// Picks the listed `(row, col)` entries into an nx1 column.
    pub fn gather(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            if r >= t.rows() || c >= t.cols() {
                return Err(Error::shape(
                    "gather",
                    format!("index ({}, {}) outside {:?}", r, c, t.shape()),
                ));
            }
            data.push(t.get(r, c));
        }
        let out = Tensor::new(at.len(), 1, data)?;
        self.push(out, Op::Gather(x, at), &[x])
    }

    /// bxb matrix of squared Euclidean distances between the rows of `x`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = t.rows();
        let mut out = Tensor::zeros(b, b);
        for i in 0..b {
            for j in (i + 1)..b {
                let d: f64 = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                out.set(i, j, d);
                out.set(j, i, d);
            }
        }
        self.push(out, Op::PairwiseSqDist(x), &[x])
    }

    /// Identity forward; the backward pass multiplies the adjoint by `-scale`.
    pub fn grad_reverse(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::usage(format!(
                "gradient reversal scale must be a finite value >= 0, got {}",
                scale
            )));
        }
        let out = self.value(x).clone();
        self.push(out, Op::GradReverse(x, scale), &[x])
    }

    /// Propagates d(root)/d(node) back to every `param` leaf, adding into
    /// the stored adjoints.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::usage(format!(
                "backward needs a 1x1 root, got {}x{}",
                shape.0, shape.1
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if let Some(acc) = self.nodes[idx].adjoint.as_mut() {
                        for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += d;
                        }
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires_grad(a) {
                        let ga = g.matmul_raw(&self.value(b).transpose());
                        accumulate(&mut adj, a, ga);
                    }
                    if self.requires_grad(b) {
                        let gb = self.value(a).transpose().matmul_raw(&g);
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires_grad(a) {
                        accumulate(&mut adj, a, g.clone());
                    }
                    if self.requires_grad(b) {
                        accumulate(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires_grad(a) {
                        accumulate(&mut adj, a, g.clone());
                    }
                    if self.requires_grad(b) {
                        accumulate(&mut adj, b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires_grad(a) {
                        let ga = elementwise(&g, self.value(b), |d, y| d * y);
                        accumulate(&mut adj, a, ga);
                    }
                    if self.requires_grad(b) {
                        let gb = elementwise(&g, self.value(a), |d, x| d * x);
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    if self.requires_grad(row) {
                        let cols = g.cols();
                        let mut gr = Tensor::zeros(1, cols);
                        for r in g.row_iter() {
                            for (acc, v) in gr.data_mut().iter_mut().zip(r) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut adj, row, gr);
                    }
                    if self.requires_grad(x) {
                        accumulate(&mut adj, x, g);
                    }
                }
                Op::Scale(x, s) => {
                    let (x, s) = (*x, *s);
                    accumulate(&mut adj, x, g.map(|v| v * s));
                }
                Op::AddScalar(x) => {
                    let x = *x;
                    accumulate(&mut adj, x, g);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let gx = elementwise(&g, self.value(x), |d, v| if v > 0.0 { d } else { 0.0 });
                    accumulate(&mut adj, x, gx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let gx = elementwise(&g, &node.value, |d, y| d * y * (1.0 - y));
                    accumulate(&mut adj, x, gx);
                }
                Op::Softplus(x) => {
                    let x = *x;
                    let gx = elementwise(&g, self.value(x), |d, v| d * sigmoid(v));
                    accumulate(&mut adj, x, gx);
                }
                Op::LogClamped(x) => {
                    let x = *x;
                    let gx = elementwise(&g, self.value(x), |d, v| {
                        if (PROB_FLOOR..=1.0).contains(&v) {
                            d / v
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let y = &node.value;
                    let cols = y.cols();
                    let mut gx = Tensor::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    accumulate(&mut adj, x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let x = *x;
                    let y = &node.value;
                    let cols = y.cols();
                    let mut gx = Tensor::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let gr = g.row(r);
                        let total: f64 = gr.iter().sum();
                        for c in 0..cols {
                            gx.set(r, c, gr[c] - y.get(r, c).exp() * total);
                        }
                    }
                    accumulate(&mut adj, x, gx);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let (r, c) = self.value(x).shape();
                    accumulate(&mut adj, x, Tensor::full(r, c, g.data()[0]));
                }
                Op::Mean(x) => {
                    let x = *x;
                    let (r, c) = self.value(x).shape();
                    let n = (r * c) as f64;
                    accumulate(&mut adj, x, Tensor::full(r, c, g.data()[0] / n));
                }
                Op::SumCols(x) => {
                    let x = *x;
                    let (rows, cols) = self.value(x).shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx.set(r, c, g.data()[r]);
                        }
                    }
                    accumulate(&mut adj, x, gx);
                }
                Op::Gather(x, at) => {
                    let x = *x;
                    let (rows, cols) = self.value(x).shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    for (k, &(r, c)) in at.iter().enumerate() {
                        gx.data_mut()[r * cols + c] += g.data()[k];
                    }
                    accumulate(&mut adj, x, gx);
                }
                Op::PairwiseSqDist(x) => {
                    let x = *x;
                    let t = self.value(x);
                    let (b, m) = t.shape();
                    let mut gx = Tensor::zeros(b, m);
                    for i in 0..b {
                        for j in 0..b {
                            if i == j {
                                continue;
                            }
                            let w = 2.0 * (g.get(i, j) + g.get(j, i));
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..m {
                                let diff = t.get(i, c) - t.get(j, c);
                                gx.data_mut()[i * m + c] += w * diff;
                            }
                        }
                    }
                    accumulate(&mut adj, x, gx);
                }
                Op::GradReverse(x, s) => {
                    let (x, s) = (*x, *s);
                    accumulate(&mut adj, x, g.map(|v| -s * v));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match adj[v.0].as_mut() {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += d;
            }
        }
        None => adj[v.0] = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2)).unwrap();
        let b = g.constant(t(2, 2, &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let p = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let ones = g.constant(t(2, 1, &[1.0, 1.0])).unwrap();
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::new();
        assert!(matches!(
            g.constant(t(1, 2, &[1.0, f64::NAN])),
            Err(Error::NonFinite(_))
        ));
        let big = g.constant(t(1, 1, &[1e308])).unwrap();
        assert!(matches!(g.mul_scalar(big, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let x = t(3, 2, &[0.0, 0.0, 1f64.ln(), 3f64.ln(), 100.0, 100.0]);
        let y = softmax_rows(&x);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert!((y.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((y.get(1, 1) - 0.75).abs() < 1e-15);
        assert_eq!(y.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = t(1, 3, &[0.3, -1.2, 2.0]);
        let b = t(1, 3, &[100.3, 98.8, 102.0]);
        let (ya, yb) = (softmax_rows(&a), softmax_rows(&b));
        for (p, q) in ya.data().iter().zip(yb.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, -2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, -2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn relu_kink_has_zero_derivative() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        let loss = g.sum(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn grad_reverse_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0])).unwrap();
        let r = g.grad_reverse(x, 1.0).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);
        // loss = x0 - 2 x1 gives incoming adjoint [1, -2]
        let w = g.constant(t(2, 1, &[1.0, -2.0])).unwrap();
        let loss = g.matmul(r, w).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(t(1, 1, &[3.0])).unwrap();
        let r = g.grad_reverse(x, 0.5).unwrap();
        let loss = g.mul_scalar(r, 2.0).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn grad_reverse_rejects_negative_scale() {
        let mut g = Graph::new();
        let x = g.param(t(1, 1, &[3.0])).unwrap();
        assert!(matches!(g.grad_reverse(x, -0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn log_prob_clamps_zero() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[0.0, 1.0])).unwrap();
        let l = g.log_prob(x).unwrap();
        assert_eq!(g.value(l).data(), &[PROB_FLOOR.ln(), 0.0]);
        let s = g.sum(l).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn pairwise_distances_are_symmetric() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 1, &[0.0, 3.0])).unwrap();
        let d = g.pairwise_sq_dist(x).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 9.0, 9.0, 0.0]);
    }
}
