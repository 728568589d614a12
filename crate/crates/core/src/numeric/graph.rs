//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the [`Graph`]; inputs always precede the node
//! that consumes them, so [`Graph::backward`] is a single reverse sweep.

use rand::Rng;

use super::tensor::{dot, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, log_softmax_row, logsumexp2, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean visibility grid for attention: `allowed(i, j)` means query `i`
/// may attend to key `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LogSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    PairwiseAdd {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    Sum(Var),
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    LogSumExp2(Var, Var),
    Rnnt {
        log_probs: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Recorded computation. Confined to one thread; never shared.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push("input", t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), rg)
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    /// Adds a length-`n` vector to every row of an `[..×n]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(b).len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.requires(x) || self.requires(b);
        self.push("add_bias", t, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let rg = self.requires(x);
        self.push("scale", t, Op::Scale(x, c), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        let rg = self.requires(x);
        self.push("tanh", t, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires(x);
        self.push("relu", t, Op::Relu(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        let rg = self.requires(x);
        self.push("gelu", t, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", format!("width {n}")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let nv = (row[j] - mean) * rs;
                normed[r * n + j] = nv;
                out[r * n + j] = nv * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            rg,
        )
    }

    /// Row lookup in a `[vocab×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding", "table must be 2-D"));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::shape("embedding", format!("id {id} >= vocab {vocab}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.requires(table);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Inverted dropout with an explicit mask source. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout rate {p} must be < 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-supplied multiplicative mask (for replay).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", "mask length"));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.requires(x);
        self.push("dropout", t, Op::Dropout { x, mask }, rg)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            log_softmax_row(src, dst);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push("log_softmax", t, Op::LogSoftmax(x), rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[tq×d]`, `k` and `v` are `[tk×d]`; the model width `d` is split
    /// into `heads` contiguous column blocks. Masked keys receive exactly zero
    /// weight. `None` means every key is visible.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        if kv.cols() != d || vv.cols() != d || vv.rows() != tk {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible into {heads} heads")));
        }
        if let Some(m) = mask {
            if m.rows() != tq || m.cols() != tk {
                return Err(Error::shape(
                    "attention",
                    format!("mask {}x{} for {tq}x{tk}", m.rows(), m.cols()),
                ));
            }
        }
        let visible = |i: usize, j: usize| mask.is_none_or(|m| m.allowed(i, j));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let mut scores = vec![0.0; tk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let qi = &qv.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    if visible(i, j) {
                        let s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::FullyMasked { row: i });
                }
                let p = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let mut sum = 0.0;
                for j in 0..tk {
                    if visible(i, j) {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        sum += e;
                    }
                }
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..tk {
                    if visible(i, j) {
                        p[j] /= sum;
                        let vj = &vv.row(j)[cols.clone()];
                        for (ov, &x) in o.iter_mut().zip(vj) {
                            *ov += p[j] * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![tq, d], out)?;
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        self.push(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention weights recorded by an attention node, laid out `[heads×tq×tk]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Selects rows (by index along the flattened leading axes) into `[n×cols]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (nr, c) = (xv.rows(), xv.cols());
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows selected"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= nr {
                return Err(Error::shape("gather_rows", format!("row {r} >= {nr}")));
            }
            out.extend_from_slice(xv.row(r));
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.requires(x);
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return Err(Error::shape("concat_rows", "nothing to concatenate")),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::shape("concat_rows", format!("width {} vs {c}", pv.cols())));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let t = Tensor::new(vec![rows, c], out)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// `[t×d] ⊕ [u×d] -> [(t·u)×d]`, row `i·u + j` holding `a_i + b_j`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols();
        if bv.cols() != d {
            return Err(Error::shape("pairwise_add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (na, nb) = (av.rows(), bv.rows());
        let mut out = Vec::with_capacity(na * nb * d);
        for i in 0..na {
            let ai = av.row(i);
            for j in 0..nb {
                out.extend(ai.iter().zip(bv.row(j)).map(|(x, y)| x + y));
            }
        }
        let t = Tensor::new(vec![na * nb, d], out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("pairwise_add", t, Op::PairwiseAdd { a, b }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires(x);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Gathers individual elements by flat index into a 1-D tensor.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if index.is_empty() {
            return Err(Error::shape("pick", "no indices"));
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            match xv.data().get(i) {
                Some(&v) => out.push(v),
                None => return Err(Error::shape("pick", format!("index {i} >= {}", xv.len()))),
            }
        }
        let t = Tensor::new(vec![index.len()], out)?;
        let rg = self.requires(x);
        self.push(
            "pick",
            t,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Element-wise `log(exp(a) + exp(b))` on single-element tensors.
    pub fn logsumexp2(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::shape("logsumexp2", "operands must be scalars"));
        }
        let v = logsumexp2(self.value(a).item(), self.value(b).item());
        let rg = self.requires(a) || self.requires(b);
        self.push("logsumexp2", Tensor::scalar(v), Op::LogSumExp2(a, b), rg)
    }

    /// Transducer negative log-likelihood over a `[t×(u+1)×k]` log-probability
    /// lattice, with the gradient from the forward-backward recursions.
    pub fn rnnt(&mut self, log_probs: Var, targets: &[usize], blank: usize) -> Result<Var> {
        let lp = self.value(log_probs);
        let lattice = crate::losses::rnnt::Lattice::from_log_probs(lp, targets, blank)?;
        let (loss, grad) = lattice.loss_and_grad();
        let rg = self.requires(log_probs);
        self.push("rnnt", Tensor::scalar(loss), Op::Rnnt { log_probs, grad }, rg)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn acc_slice(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        self.acc(grads, v, |s| {
            for (o, d) in s.iter_mut().zip(delta) {
                *o += d;
            }
        });
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                self.acc(grads, *a, |s| gemm_a_bt_acc(g, bv.data(), s, m, k, n));
                self.acc(grads, *b, |s| gemm_at_b_acc(av.data(), g, s, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc_slice(grads, *a, g);
                self.acc_slice(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.acc_slice(grads, *x, g);
                let n = self.value(*b).len();
                self.acc(grads, *b, |s| {
                    for row in g.chunks(n) {
                        for (o, v) in s.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |s| {
                    for (o, v) in s.iter_mut().zip(g) {
                        *o += v * c;
                    }
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |s| {
                    for (row_g, row_n) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            s[j] += row_g[j] * row_n[j];
                        }
                    }
                });
                self.acc(grads, *bias, |s| {
                    for row_g in g.chunks(n) {
                        for j in 0..n {
                            s[j] += row_g[j];
                        }
                    }
                });
                self.acc(grads, *x, |s| {
                    let nf = n as f64;
                    for (r, rs) in rstd.iter().enumerate() {
                        let rg = &g[r * n..(r + 1) * n];
                        let rn = &normed[r * n..(r + 1) * n];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..n {
                            let dn = rg[j] * gv[j];
                            mean_dn += dn;
                            mean_dn_n += dn * rn[j];
                        }
                        mean_dn /= nf;
                        mean_dn_n /= nf;
                        for j in 0..n {
                            let dn = rg[j] * gv[j];
                            s[r * n + j] += rs * (dn - mean_dn - rn[j] * mean_dn_n);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.acc(grads, *table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                self.acc(grads, *x, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            srow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::GatherRows { x, rows } => {
                let c = self.value(*x).cols();
                self.acc(grads, *x, |s| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            s[r * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_slice(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::PairwiseAdd { a, b } => {
                let (na, nb, d) = (self.value(*a).rows(), self.value(*b).rows(), self.value(*a).cols());
                self.acc(grads, *a, |s| {
                    for i in 0..na {
                        for j in 0..nb {
                            let row = &g[(i * nb + j) * d..(i * nb + j + 1) * d];
                            for c in 0..d {
                                s[i * d + c] += row[c];
                            }
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..na {
                        for j in 0..nb {
                            let row = &g[(i * nb + j) * d..(i * nb + j + 1) * d];
                            for c in 0..d {
                                s[j * d + c] += row[c];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc_slice(grads, *x, g),
            Op::Sum(x) => {
                self.acc(grads, *x, |s| {
                    for o in s.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Pick { x, index } => {
                self.acc(grads, *x, |s| {
                    for (i, &idx) in index.iter().enumerate() {
                        s[idx] += g[i];
                    }
                });
            }
            Op::LogSumExp2(a, b) => {
                let y = node.value.item();
                let (av, bv) = (self.value(*a).item(), self.value(*b).item());
                let wa = if av == f64::NEG_INFINITY { 0.0 } else { (av - y).exp() };
                let wb = if bv == f64::NEG_INFINITY { 0.0 } else { (bv - y).exp() };
                self.acc(grads, *a, |s| s[0] += g[0] * wa);
                self.acc(grads, *b, |s| s[0] += g[0] * wb);
            }
            Op::Rnnt { log_probs, grad } => {
                self.acc(grads, *log_probs, |s| {
                    for (o, d) in s.iter_mut().zip(grad) {
                        *o += g[0] * d;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d, tk) = (qv.rows(), qv.cols(), kv.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq * d];
        let mut dk = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        let mut dscore = vec![0.0; tk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let go = &g[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..tk {
                    if p[j] == 0.0 {
                        dscore[j] = 0.0;
                        continue;
                    }
                    let vj = &vv.row(j)[off..off + dh];
                    let dp = dot(go, vj);
                    dscore[j] = dp;
                    weighted += p[j] * dp;
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (o, &x) in dvj.iter_mut().zip(go) {
                        *o += p[j] * x;
                    }
                }
                let qi = &qv.row(i)[off..off + dh];
                for j in 0..tk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dscore[j] - weighted) * scale;
                    let kj = &kv.row(j)[off..off + dh];
                    let dqi = &mut dq[i * d + off..i * d + off + dh];
                    for (o, &x) in dqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + dh];
                    for (o, &x) in dkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        self.acc_slice(grads, q, &dq);
        self.acc_slice(grads, k, &dk);
        self.acc_slice(grads, v, &dv);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.input(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0])).unwrap();
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut g = Graph::new();
        let q = g.input(t(&[2, 4], &[0.3, -1.0, 2.0, 0.5, 9.0, 1.0, -3.0, 0.0])).unwrap();
        let k = g.input(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let v = g.input(t(&[1, 4], &[0.5, 0.25, -1.0, 7.0])).unwrap();
        let o = g.attention(q, k, v, 2, None).unwrap();
        for row in g.value(o).data().chunks(4) {
            assert_eq!(row, &[0.5, 0.25, -1.0, 7.0]);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[2, 2])).unwrap();
        let k = g.input(Tensor::zeros(&[2, 2])).unwrap();
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        let err = g.attention(q, k, k, 1, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 1 }));
    }

    #[test]
    fn uniform_scores_average_visible_values() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[1, 2])).unwrap();
        let k = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let v = g.input(t(&[3, 2], &[1.0, 10.0, 3.0, 20.0, 100.0, 100.0])).unwrap();
        let mask = Mask::from_fn(1, 3, |_, j| j < 2);
        let o = g.attention(q, k, v, 1, Some(&mask)).unwrap();
        assert_eq!(g.value(o).data(), &[2.0, 15.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let mut rng = rand::rng();
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn backward_revisits_shared_inputs() {
        // y = sum(x*x) -> dy/dx = 2x
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }
}
