//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value. Nodes that
//! depend on a leaf created with `requires_grad = true` are marked, and
//! [`Tape::backward`] only visits marked nodes, so frozen weights cost nothing
//! on the backward pass.
//!
//! Shape mismatches inside the tape are programming errors and panic with
//! both shapes in the message; user-facing validation happens before a model
//! is run.

use std::sync::Arc;

use super::ops::{self, gemm};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Exp(Var),
    Transpose(Var),
    Reshape(Var),
    Center(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanCols(Var),
    L2NormalizeRows(Var, Vec<f32>),
    Sum(Var),
    LogSigmoid(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One tape per forward pass; not shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
    counting: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_panic(op: &str, a: &Tensor, b: &Tensor) -> ! {
    panic!(
        "shape error in {op}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that counts multiply-accumulates of every forward matmul.
    pub fn counting() -> Self {
        Tape {
            counting: true,
            ..Self::default()
        }
    }

    pub fn set_counting(&mut self, on: bool) {
        self.counting = on;
    }

    pub fn is_counting(&self) -> bool {
        self.counting
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(t), Op::Leaf, requires_grad)
    }

    pub fn leaf_arc(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value_arc(v);
        self.leaf_arc(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            shape_panic("matmul", ta, tb);
        }
        let (c, m, n) = gemm(
            ta.data(),
            ta.rows(),
            ta.cols(),
            false,
            tb.data(),
            tb.rows(),
            tb.cols(),
            false,
        );
        if self.counting {
            self.macs += (m * ta.cols() * n) as u64;
        }
        self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b), &[a, b])
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            shape_panic(name, ta, tb);
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, "add", |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, "sub", |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, "mul", |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    /// `x[n, d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.cols();
        if tb.len() != d {
            shape_panic("add_row", tx, tb);
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::AddRow(x, bias), &[x, bias])
    }

    /// `x * s` where `s` is a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let t = self.value(x).map(|v| v * k);
        self.push(t, Op::MulScalar(x, s), &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f32::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x), &[x])
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Subtracts the mean of all elements.
    pub fn center(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mean = (tx.data().iter().map(|&v| v as f64).sum::<f64>() / tx.len() as f64) as f32;
        let t = tx.map(|v| v - mean);
        self.push(t, Op::Center(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            shape_panic("layer_norm", tx, tg);
        }
        let (y, xhat, rstd) =
            ops::layer_norm_raw(tx.data(), tx.rows(), d, tg.data(), tb.data(), eps);
        let t = Tensor::from_parts(tx.shape().to_vec(), y);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = ops::gelu(self.value(x));
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            ops::softmax_row_inplace(row);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Var {
        let t = self.value(x).gather_rows(ids);
        self.push(t, Op::GatherRows(x, ids.to_vec()), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let ids: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &ids)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        assert!(start + width <= c, "slice_cols {start}+{width} out of {c}");
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + start + width]);
        }
        let t = Tensor::from_parts(vec![r, width], data);
        self.push(t, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat_rows(&ts).unwrap_or_else(|e| panic!("{e}"));
        self.push(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows(), r, "concat_cols row mismatch");
            let w = tp.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(tp.row(i));
            }
            off += w;
        }
        let t = Tensor::from_parts(vec![r, total], data);
        self.push(t, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Mean over columns: `[n, d] -> [n]`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let data: Vec<f32> = (0..tx.rows())
            .map(|i| tx.row(i).iter().sum::<f32>() / c as f32)
            .collect();
        let t = Tensor::from_parts(vec![tx.rows()], data);
        self.push(t, Op::MeanCols(x), &[x])
    }

    /// Divides each row by its L2 norm. Panics on a zero row; callers check
    /// norms beforehand where the input is user-controlled.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = Tensor::l2_norm(row);
            assert!(n > 0.0, "l2_normalize_rows: zero-norm row");
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::L2NormalizeRows(x, norms), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(ops::log_sigmoid);
        self.push(t, Op::LogSigmoid(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits[n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.value(logits);
        let c = tl.cols();
        assert_eq!(tl.rows(), targets.len(), "cross_entropy batch mismatch");
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0f32;
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            loss += lse - row[y];
            ops::softmax_row_inplace(row);
        }
        loss /= targets.len() as f32;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let (d, m, n) = gemm(
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                        tb.data(),
                        tb.rows(),
                        tb.cols(),
                        true,
                    );
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, n], d));
                }
                if self.needs_grad(*b) {
                    let (d, m, n) = gemm(
                        ta.data(),
                        ta.rows(),
                        ta.cols(),
                        true,
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                    );
                    self.accumulate(grads, *b, Tensor::from_parts(vec![m, n], d));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.needs_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|v| v * k));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs_grad(*bias) {
                    let tb = self.value(*bias);
                    let d = tb.len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d.max(1)) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(tb.shape().to_vec(), gb));
                }
            }
            Op::MulScalar(x, s) => {
                let k = self.value(*s).item();
                self.accumulate(grads, *x, g.map(|v| v * k));
                if self.needs_grad(*s) {
                    let ds = Tensor::dot(g.data(), self.value(*x).data());
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Exp(x) => {
                let d = g.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Transpose(x) => {
                self.accumulate(grads, *x, g.transpose());
            }
            Op::Center(x) => {
                let mean = (g.data().iter().map(|&v| v as f64).sum::<f64>() / g.len() as f64) as f32;
                self.accumulate(grads, *x, g.map(|v| v - mean));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                let rows = g.rows();
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * tg.data()[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f32;
                        mean_dh_h /= d as f32;
                        for c in 0..d {
                            let dh = gr[c] * tg.data()[c];
                            dx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            let gv = g.data()[r * d + c];
                            dg[c] += gv * xhat[r * d + c];
                            db[c] += gv;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(tg.shape().to_vec(), dg));
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::from_parts(bshape, db));
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &xv)| gv * ops::gelu_grad_scalar(xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot = Tensor::dot(gr, yr);
                    for k in 0..c {
                        dr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::GatherRows(x, ids) => {
                if self.needs_grad(*x) {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut d = vec![0.0; tx.len()];
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[id * c + j] += g.data()[k * c + j];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::SliceCols(x, start) => {
                if self.needs_grad(*x) {
                    let tx = self.value(*x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let w = g.cols();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.rows() * c;
                    if self.needs_grad(p) {
                        let d = g.data()[off..off + n].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(tp.shape().to_vec(), d));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (g.rows(), g.cols());
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs_grad(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![r, w], d));
                    }
                    off += w;
                }
            }
            Op::MeanCols(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = Vec::with_capacity(tx.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv / c as f32).take(c));
                }
                self.accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), d));
            }
            Op::L2NormalizeRows(x, norms) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = Tensor::dot(yr, gr);
                    for k in 0..c {
                        d[r * c + k] = (gr[k] - yr[k] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
            }
            Op::Sum(x) => {
                let k = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, k));
            }
            Op::LogSigmoid(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, &xv)| gv * ops::sigmoid(-xv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let k = g.item() / targets.len() as f32;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= 1.0;
                }
                for v in d.iter_mut() {
                    *v *= k;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::from_parts(shape, d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{check_gradients, GradCheck};
    use crate::nncore::rng::SeededRng;

    fn rand_t(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        rng.normal_tensor(shape, 0.0, 1.0)
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[2, 3], 0.7), true);
        let l = tape.sum(p);
        let g = tape.backward(l);
        assert_eq!(g.wrt(p).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn zero_times_p_gives_zero_grad() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[4], 2.0), true);
        let z = tape.scale(p, 0.0);
        let l = tape.sum(z);
        let g = tape.backward(l);
        assert!(g.wrt(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disconnected_param_has_no_grad() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::ones(&[2]), true);
        let q = tape.leaf(Tensor::ones(&[2]), true);
        let l = tape.sum(p);
        let g = tape.backward(l);
        assert!(g.wrt(q).is_none());
    }

    #[test]
    fn matmul_counts_macs() {
        let mut tape = Tape::counting();
        let a = tape.constant(Tensor::ones(&[3, 4]));
        let b = tape.constant(Tensor::ones(&[4, 5]));
        tape.matmul(a, b);
        assert_eq!(tape.macs(), 60);
    }

    fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = SeededRng::new(11);
        for trial in 0..10 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
            let report: GradCheck = check_gradients(&inputs, &f, 1e-3);
            assert!(
                report.rel_error < 1e-3,
                "{name} trial {trial}: rel err {} {:?}",
                report.rel_error,
                report.per_input
            );
        }
    }

    #[test]
    fn gradcheck_elementwise_and_linear() {
        check("matmul", &[&[3, 4], &[4, 2]], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let q = t.mul(m, m);
            t.sum(q)
        });
        check("add_row+gelu", &[&[3, 4], &[4]], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let y = t.gelu(x);
            t.sum(y)
        });
        check("sub/exp/scale", &[&[2, 3], &[2, 3]], |t, v| {
            let d = t.sub(v[0], v[1]);
            let s = t.scale(d, 0.3);
            let e = t.exp(s);
            t.sum(e)
        });
    }

    #[test]
    fn gradcheck_norms_and_softmax() {
        check("layer_norm", &[&[3, 5], &[5], &[5], &[3, 5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let w = t.mul(y, v[3]);
            t.sum(w)
        });
        check("softmax_rows", &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.softmax_rows(v[0]);
            let w = t.mul(y, v[1]);
            t.sum(w)
        });
        check("l2norm", &[&[2, 4], &[2, 4]], |t, v| {
            let y = t.l2_normalize_rows(v[0]);
            let w = t.mul(y, v[1]);
            t.sum(w)
        });
    }

    #[test]
    fn gradcheck_structural() {
        check("gather/concat/slice", &[&[4, 3], &[2, 3]], |t, v| {
            let g = t.gather_rows(v[0], &[3, 1, 1]);
            let c = t.concat_rows(&[g, v[1]]);
            let a = t.slice_cols(c, 1, 2);
            let b = t.slice_cols(c, 0, 1);
            let cc = t.concat_cols(&[b, a]);
            let tr = t.transpose(cc);
            let m = t.mean_cols(tr);
            let sq = t.mul(m, m);
            t.sum(sq)
        });
        check("mul_scalar/log_sigmoid", &[&[3, 2], &[1]], |t, v| {
            let y = t.mul_scalar(v[0], v[1]);
            let l = t.log_sigmoid(y);
            t.sum(l)
        });
        check("cross_entropy", &[&[3, 4]], |t, v| t.cross_entropy(v[0], &[0, 3, 1]));
        check("reshape/center", &[&[2, 3], &[6]], |t, v| {
            let r = t.reshape(v[0], vec![6]);
            let c = t.center(r);
            let w = t.mul(c, v[1]);
            let e = t.exp(w);
            t.sum(e)
        });
    }
}
