use std::sync::Arc;

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{ParamId, ParamStore, SparseMatrix, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    L2NormRows(Var),
    LogSumExp(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    SpMM(Arc<SparseMatrix>, Var),
    DivScalar(Var, Var),
    Sum(Var),
    Mse(Var, Vec<f64>),
    Bce(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Records primitive operations for reverse-mode differentiation.
///
/// One tape per forward pass; values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// A parameter leaf. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.value(id).clone();
        if store.is_frozen(id) {
            self.push(t, Op::Constant, false)
        } else {
            self.push(t, Op::Param(id), true)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = (ta.dims(), tb.dims());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), ng))
    }

    /// Matrix product whose inner sums do not depend on the order of the
    /// shared axis; used where that axis runs over graph nodes.
    pub fn matmul_unordered(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = (ta.dims(), tb.dims());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; n * m];
        let mut buf = Vec::with_capacity(k);
        for i in 0..n {
            for j in 0..m {
                buf.clear();
                buf.extend((0..k).map(|p| ta.data()[i * k + p] * tb.data()[p * m + j]));
                out[i * m + j] = sorted_sum(&mut buf);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(shape_err(name, ta, tb));
        }
        let (r, c) = ta.dims();
        let d = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::matrix(r, c, d))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// `x (n×m) + bias (1×m)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (n, m) = tx.dims();
        if tb.dims() != (1, m) {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut d = tx.data().to_vec();
        for row in d.chunks_mut(m.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::matrix(n, m, d), Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims();
        let d = t.data().iter().map(|v| v * s).collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c, d), Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims();
        let d = t.data().iter().map(|v| v.max(0.0)).collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c, d), Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims();
        let d = t.data().iter().map(|&v| sigmoid(v)).collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c, d), Op::Sigmoid(x), ng)
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims();
        let mut d = t.data().to_vec();
        let mut buf = Vec::with_capacity(c);
        for row in d.chunks_mut(c.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
            }
            buf.clear();
            buf.extend_from_slice(row);
            let s = sorted_sum(&mut buf);
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, c, d), Op::RowSoftmax(x), ng)
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, m) = tx.dims();
        if tg.dims() != (1, m) {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.dims() != (1, m) {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = tx.row(i);
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..m {
                let h = (row[j] - mu) * inv;
                xhat[i * m + j] = h;
                out[i * m + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::matrix(n, m, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean over axis 0 (giving `1×m`) or axis 1 (giving `n×1`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims();
        let out = match axis {
            0 => {
                let mut buf = Vec::with_capacity(n);
                let o = (0..m)
                    .map(|j| {
                        buf.clear();
                        buf.extend((0..n).map(|i| t.at(i, j)));
                        sorted_sum(&mut buf) / n as f64
                    })
                    .collect();
                Tensor::matrix(1, m, o)
            }
            1 => Tensor::matrix(
                n,
                1,
                (0..n).map(|i| t.row(i).iter().sum::<f64>() / m as f64).collect(),
            ),
            _ => return Err(Error::Autodiff(format!("mean over axis {axis}"))),
        };
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanAxis(x, axis), ng))
    }

    /// Stack rows (axis 0) or join columns (axis 1).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::Autodiff("empty concat".into()))?);
        let (n0, m0) = first.dims();
        let out = match axis {
            0 => {
                let mut d = Vec::new();
                let mut rows = 0;
                for &v in xs {
                    let t = self.value(v);
                    if t.cols() != m0 {
                        return Err(shape_err("concat", first, t));
                    }
                    rows += t.rows();
                    d.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, m0, d)
            }
            1 => {
                let mut cols = 0;
                for &v in xs {
                    let t = self.value(v);
                    if t.rows() != n0 {
                        return Err(shape_err("concat", first, t));
                    }
                    cols += t.cols();
                }
                let mut d = Vec::with_capacity(n0 * cols);
                for i in 0..n0 {
                    for &v in xs {
                        d.extend_from_slice(self.value(v).row(i));
                    }
                }
                Tensor::matrix(n0, cols, d)
            }
            _ => return Err(Error::Autodiff(format!("concat over axis {axis}"))),
        };
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn l2_norm_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.rows();
        let d = (0..n)
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(n, 1, d), Op::L2NormRows(x), ng)
    }

    /// `log Σ exp(x)` over all entries, computed with max subtraction.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = logsumexp(t.data());
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::LogSumExp(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims();
        let mut d = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(Error::Autodiff(format!("gather row {i} of {n}")));
            }
            d.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(idx.len(), m, d),
            Op::GatherRows(x, idx.to_vec()),
            ng,
        ))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims();
        if start > end || end > m {
            return Err(Error::Autodiff(format!("slice {start}..{end} of {m} columns")));
        }
        let mut d = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            d.extend_from_slice(&t.row(i)[start..end]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(n, end - start, d),
            Op::SliceCols(x, start, end),
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, m) = t.dims();
        let mut d = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                d[j * n + i] = t.data()[i * m + j];
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::matrix(m, n, d), Op::Transpose(x), ng)
    }

    /// Constant sparse matrix times `x`. Row sums are independent of entry
    /// order.
    pub fn spmm(&mut self, s: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = t.dims();
        if s.cols != n {
            return Err(Error::Shape {
                op: "spmm",
                lhs: vec![s.rows, s.cols],
                rhs: t.shape().to_vec(),
            });
        }
        let mut d = vec![0.0; s.rows * m];
        let mut buf = Vec::new();
        for (r, entries) in s.entries.iter().enumerate() {
            for j in 0..m {
                buf.clear();
                buf.extend(entries.iter().map(|&(c, w)| w * t.at(c, j)));
                d[r * m + j] = sorted_sum(&mut buf);
            }
        }
        let ng = self.ng(x);
        let rows = s.rows;
        Ok(self.push(Tensor::matrix(rows, m, d), Op::SpMM(s, x), ng))
    }

    /// `x / s` for a `1×1` divisor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.len() != 1 {
            return Err(shape_err("div_scalar", tx, ts));
        }
        let sv = ts.item();
        let (r, c) = tx.dims();
        let d = tx.data().iter().map(|v| v / sv).collect();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(Tensor::matrix(r, c, d), Op::DivScalar(x, s), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::Sum(x), ng)
    }

    /// Mean squared error against a constant target of equal length.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != target.len() {
            return Err(Error::Shape {
                op: "mse_loss",
                lhs: t.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len().max(1) as f64;
        let v = t
            .data()
            .iter()
            .zip(target)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / n;
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target.to_vec()), ng))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce_loss(&mut self, prob: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(prob);
        if t.len() != target.len() {
            return Err(Error::Shape {
                op: "bce_loss",
                lhs: t.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len().max(1) as f64;
        let v = t
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(prob);
        Ok(self.push(Tensor::scalar(v), Op::Bce(prob, target.to_vec()), ng))
    }

    /// Reverse pass from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward from non-scalar of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.pullback(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate(*id, g);
            }
        }
        Ok(grads)
    }

    fn pullback(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((n, k), (_, m)) = (ta.dims(), tb.dims());
                acc(*a, &mut |s| matmul_nt_acc(g, tb.data(), s, n, k, m));
                acc(*b, &mut |s| matmul_tn_acc(ta.data(), g, s, n, k, m));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::AddRow(x, b) => {
                let m = self.value(*b).len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks(m.max(1)) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += k * v)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let m = y.cols();
                acc(*x, &mut |s| {
                    for (r, (yr, gr)) in y.data().chunks(m).zip(g.chunks(m)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            s[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let m = node.value.cols();
                let gam = self.value(*gamma).data();
                acc(*gamma, &mut |s| {
                    for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gr in g.chunks(m) {
                        add_into(s, gr);
                    }
                });
                acc(*x, &mut |s| {
                    for (r, (gr, hr)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..m {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let k = inv_std[r] / m as f64;
                        for j in 0..m {
                            let d = gr[j] * gam[j];
                            s[r * m + j] += k * (m as f64 * d - sum_d - hr[j] * sum_dh);
                        }
                    }
                });
            }
            Op::MeanAxis(x, axis) => {
                let (n, m) = self.value(*x).dims();
                acc(*x, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += if *axis == 0 {
                                g[j] / n as f64
                            } else {
                                g[i] / m as f64
                            };
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                if *axis == 0 {
                    let mut off = 0;
                    for v in xs {
                        let len = self.value(*v).len();
                        acc(*v, &mut |s| add_into(s, &g[off..off + len]));
                        off += len;
                    }
                } else {
                    let total = node.value.cols();
                    let n = node.value.rows();
                    let mut off = 0;
                    for v in xs {
                        let c = self.value(*v).cols();
                        acc(*v, &mut |s| {
                            for i in 0..n {
                                add_into(&mut s[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c]);
                            }
                        });
                        off += c;
                    }
                }
            }
            Op::L2NormRows(x) => {
                let t = self.value(*x);
                let m = t.cols();
                let norms = node.value.data();
                acc(*x, &mut |s| {
                    for (i, &r) in norms.iter().enumerate() {
                        // 0/0 at a zero row: the norm is not differentiable there
                        for j in 0..m {
                            s[i * m + j] += g[i] * t.data()[i * m + j] / r;
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let y = node.value.item();
                let xv = self.value(*x).data();
                acc(*x, &mut |s| {
                    for (o, v) in s.iter_mut().zip(xv) {
                        *o += g[0] * (v - y).exp();
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let m = self.value(*x).cols();
                acc(*x, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * m..(i + 1) * m], &g[k * m..(k + 1) * m]);
                    }
                });
            }
            Op::SliceCols(x, start, end) => {
                let (n, m) = self.value(*x).dims();
                let w = end - start;
                acc(*x, &mut |s| {
                    for i in 0..n {
                        add_into(&mut s[i * m + start..i * m + end], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (n, m) = self.value(*x).dims();
                acc(*x, &mut |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::SpMM(sp, x) => {
                let m = self.value(*x).cols();
                acc(*x, &mut |s| {
                    for (r, entries) in sp.entries.iter().enumerate() {
                        let grow = &g[r * m..(r + 1) * m];
                        for &(c, w) in entries {
                            for (o, v) in s[c * m..(c + 1) * m].iter_mut().zip(grow) {
                                *o += w * v;
                            }
                        }
                    }
                });
            }
            Op::DivScalar(x, sv) => {
                let d = self.value(*sv).item();
                let xv = self.value(*x).data();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += v / d));
                acc(*sv, &mut |s| {
                    let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    s[0] -= dot / (d * d);
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::Mse(p, target) => {
                let pv = self.value(*p).data();
                let n = target.len().max(1) as f64;
                acc(*p, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * 2.0 * (pv[i] - target[i]) / n;
                    }
                });
            }
            Op::Bce(p, target) => {
                let pv = self.value(*p).data();
                let n = target.len().max(1) as f64;
                acc(*p, &mut |s| {
                    for i in 0..s.len() {
                        let q = pv[i];
                        if q <= BCE_CLAMP || q >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        s[i] += g[0] * (q - target[i]) / (q * (1.0 - q)) / n;
                    }
                });
            }
        }
    }
}

// Sum in ascending order so the result depends only on the multiset of terms.
fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(x)` with max subtraction; `-inf` for an empty slice.
pub fn logsumexp(x: &[f64]) -> f64 {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}
