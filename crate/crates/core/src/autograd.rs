//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node to a [`Tape`]; node values are kept for the
//! backward sweep. Parameter tensors enter as borrowed leaves so a forward
//! pass never copies model weights. A tape supports exactly one call to
//! [`Tape::backward`]; a second call returns [`Error::BackwardAlreadyRun`].
//!
//! All operations work on rank-2 values (`[rows x cols]`) except biases and
//! layer-norm affine parameters, which are rank-1 `[cols]`. Scalars have
//! shape `[1]`.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows { x: Var, rows: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Trace(Var),
    Ln(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    DotConst { x: Var, weights: Vec<f64> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation. Nodes are stored in creation order, which is
/// a topological order by construction.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrows a tensor as a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Takes ownership of a tensor as a leaf.
    pub fn owned_leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "constant of shape {shape:?} with {} values",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Gradient of the backward target with respect to `v`. `None` before
    /// backward and for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.rg(v) {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `v` out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm_nn(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [M x K]`, `b: [N x K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = gemm_nt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose(self.value(x), r, c);
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a, b), rg))
    }

    /// Adds a `[N]` bias to every row of a `[M x N]` value.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
        }
        debug_assert_eq!(out.len(), r * c);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    /// Row-wise softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, c) = dims2(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    /// Row-wise softmax restricted to columns with `keep[j] == true`; masked
    /// columns get probability exactly zero, as with a `-inf` logit.
    pub fn softmax_masked(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        if keep.len() != c {
            return Err(Error::LengthMismatch {
                what: "softmax key mask",
                left: keep.len(),
                right: c,
            });
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::InvalidTensor("softmax with every column masked".into()));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (v, &k) in row.iter_mut().zip(keep) {
                *v = if k { (*v - max).exp() } else { 0.0 };
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg))
    }

    /// Layer normalisation over the last axis: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Row gather from a `[V x D]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather", s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::InvalidTensor("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                extent: v,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0])[1];
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != c {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != r {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape("slice_cols", s, &[start, len]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Mean of the selected rows, producing `[1 x D]`.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if rows.is_empty() {
            return Err(Error::InvalidTensor("mean over zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange { index: bad, extent: r });
        }
        let v = self.value(x);
        let mut out = vec![0.0; c];
        for &i in rows {
            out.iter_mut().zip(&v[i * c..(i + 1) * c]).for_each(|(o, x)| *o += x);
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(
            vec![1, c],
            out,
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = dims2(self.shape(x));
        let v = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in v.chunks_exact(c) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|a| a / n));
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("trace", s, &[]));
        }
        let n = s[0];
        let v = self.value(x);
        let t = (0..n).map(|i| v[i * n + i]).sum();
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![t], Op::Trace(x), rg))
    }

    /// Elementwise natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if let Some(bad) = v.iter().find(|&&a| a <= 0.0 || !a.is_finite()) {
            return Err(Error::InvalidTensor(format!("ln of non-positive value {bad}")));
        }
        let out = v.iter().map(|a| a.ln()).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Ln(x), rg))
    }

    /// Sum over rows of softmax cross-entropy against integer targets.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.shape(logits));
        if targets.len() != r {
            return Err(Error::LengthMismatch {
                what: "cross-entropy targets vs logit rows",
                left: targets.len(),
                right: r,
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::IndexOutOfRange { index: bad, extent: c });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `sum(x * weights)` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::LengthMismatch {
                what: "dot_const weights",
                left: weights.len(),
                right: self.value(x).len(),
            });
        }
        let s = self.value(x).iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            vec![1],
            vec![s],
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Linear map `x · w + b` with `w: [in x out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn accumulate(&mut self, v: Var, g: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        g(slot);
    }

    fn add_into(&mut self, v: Var, src: &[f64]) {
        self.accumulate(v, |dst| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s));
    }

    /// Propagates d(loss)/d(node) to every node that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }

        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad
                && matches!(self.nodes[i].op, Op::Leaf)
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![0.0; self.nodes[i].value.len()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Ops are moved out temporarily so saved activations can be read while
        // gradients are written into other nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let da = gemm_nt(g, self.value(b), m, n, k);
                    self.add_into(a, &da);
                }
                if self.rg(b) {
                    let db = gemm_tn(self.value(a), g, m, k, n);
                    self.add_into(b, &db);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.rg(a) {
                    let da = gemm_nn(g, self.value(b), m, n, k);
                    self.add_into(a, &da);
                }
                if self.rg(b) {
                    let db = gemm_tn(g, self.value(a), m, n, k);
                    self.add_into(b, &db);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let dx = transpose(g, c, r);
                self.add_into(x, &dx);
            }
            &Op::Add(a, b) => {
                self.add_into(a, g);
                self.add_into(b, g);
            }
            &Op::Sub(a, b) => {
                self.add_into(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_into(b, &neg);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                    self.add_into(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                    self.add_into(b, &db);
                }
            }
            &Op::AddBias(x, bias) => {
                self.add_into(x, g);
                if self.rg(bias) {
                    let c = self.shape(bias)[0];
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.add_into(bias, &db);
                }
            }
            &Op::Scale(x, s) => {
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.add_into(x, &dx);
            }
            &Op::Softmax(x) => {
                let (_, c) = dims2(&self.nodes[i].shape);
                let y = &self.nodes[i].value;
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(c).zip(g.chunks_exact(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yy, gg)| yy * (gg - dot)));
                }
                self.add_into(x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = self.shape(gamma)[0];
                if self.rg(gamma) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (a, b))| *d += a * b);
                    }
                    self.add_into(gamma, &dg);
                }
                if self.rg(beta) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks_exact(c) {
                        db.iter_mut().zip(gr).for_each(|(d, a)| *d += a);
                    }
                    self.add_into(beta, &db);
                }
                if self.rg(x) {
                    let gv = self.value(gamma);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), &is) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(inv_std)
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| is * (d - mean_dh - h * mean_dh_h)),
                        );
                    }
                    self.add_into(x, &dx);
                }
            }
            &Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(gg, &v)| gg * gelu_grad(v))
                    .collect();
                self.add_into(x, &dx);
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let d = self.shape(table)[1];
                self.accumulate(table, |dst| {
                    for (row, &id) in g.chunks_exact(d).zip(ids) {
                        dst[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.add_into(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(&self.nodes[i].shape);
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(r * w);
                    for row in 0..r {
                        dp.extend_from_slice(&g[row * total + start..row * total + start + w]);
                    }
                    self.add_into(p, &dp);
                    start += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                let w = self.nodes[i].shape[1];
                self.accumulate(x, |dst| {
                    for row in 0..r {
                        dst[row * c + start..row * c + start + w]
                            .iter_mut()
                            .zip(&g[row * w..(row + 1) * w])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MeanRows { x, rows } => {
                let x = *x;
                let c = self.shape(x)[1];
                let inv = 1.0 / rows.len() as f64;
                self.accumulate(x, |dst| {
                    for &r in rows {
                        dst[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(a, b)| *a += b * inv);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let x = *x;
                let (_, c) = dims2(&self.nodes[i].shape);
                let y = &self.nodes[i].value;
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yy, gg)| (gg - yy * dot) / n));
                }
                self.add_into(x, &dx);
            }
            &Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(x, |dst| dst.iter_mut().for_each(|d| *d += g0));
            }
            &Op::Trace(x) => {
                let n = self.shape(x)[0];
                let g0 = g[0];
                self.accumulate(x, |dst| (0..n).for_each(|k| dst[k * n + k] += g0));
            }
            &Op::Ln(x) => {
                let dx: Vec<f64> = g.iter().zip(self.value(x)).map(|(a, b)| a / b).collect();
                self.add_into(x, &dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                let c = self.shape(logits)[1];
                let g0 = g[0];
                self.accumulate(logits, |dst| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            dst[r * c + j] += g0 * probs[r * c + j];
                        }
                        dst[r * c + t] -= g0;
                    }
                });
            }
            Op::DotConst { x, weights } => {
                let x = *x;
                let g0 = g[0];
                self.accumulate(x, |dst| {
                    dst.iter_mut().zip(weights).for_each(|(d, w)| *d += g0 * w)
                });
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF via `erf`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}

/// `c[m x n] = a[m x k] · b[k x n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cc, bb)| *cc += av * bb);
        }
    }
    c
}

/// `c[m x n] = a[m x k] · b[n x k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k x n] = a[m x k]ᵀ · b[m x n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            c[p * n..(p + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(cc, bb)| *cc += av * bb);
        }
    }
    c
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
