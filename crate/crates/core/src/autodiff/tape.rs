//! Reverse-mode tape.
//!
//! A `Tape` records every primitive applied during one evaluation. Nodes are appended in
//! execution order, so the node vector is already a topological order and `backward` is a
//! single reverse sweep. Gradient targets are declared at `backward` time; only nodes on a
//! path from a target to the loss receive adjoints.

use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Margin { logits: Var, labels: Vec<usize>, weights: Vec<T>, runner_up: Vec<usize> },
    Sum(Var),
    SumSquares(Var),
    Dot(Var, Var),
}

impl<T> Op<T> {
    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::SumSquares(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::MaxPool2 { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } | Op::Margin { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-evaluation record of primitive operations. Not `Sync`; one tape per thread.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(av.data(), m, k), MatRef::new(bv.data(), k, n), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    /// Add a bias vector `[n]` to every row of `[m, n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.shape().len() != 2 || bv.shape() != [xv.shape()[1]] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let n = bv.len();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("add_bias", value, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push("add", value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push("sub", value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push("scale", value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.tanh());
        self.push("tanh", value, Op::Tanh(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Stride-1 2-D convolution. `x: [B, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bv.shape() != [ws[0]]
        {
            return Err(Error::shape(
                "conv2d",
                format!("x {xs:?}, w {ws:?}, b {:?}", bv.shape()),
            ));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            h: xs[2],
            w: xs[3],
            out_c: ws[0],
            k,
            pad,
            out_h: xs[2] + 2 * pad - k + 1,
            out_w: xs[3] + 2 * pad - k + 1,
        };
        let hw = geom.out_h * geom.out_w;
        let ckk = geom.in_c * k * k;
        let mut out = vec![T::zero(); geom.batch * geom.out_c * hw];
        let mut cols = vec![T::zero(); ckk * hw];
        let in_len = geom.in_c * geom.h * geom.w;
        for bi in 0..geom.batch {
            im2col(&xv.data()[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
            let o = &mut out[bi * geom.out_c * hw..(bi + 1) * geom.out_c * hw];
            for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bv.data()[oc]);
            }
            gemm(
                MatRef::new(wv.data(), geom.out_c, ckk),
                MatRef::new(&cols, ckk, hw),
                T::one(),
                o,
            );
        }
        let value = Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom })
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]` (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2", format!("{s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let data = xv.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push("max_pool2", value, Op::MaxPool2 { x, argmax })
    }

    /// Weighted softmax cross-entropy: `sum_i w_i * (-log softmax(logits_i)[y_i])`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = matrix_dims(lv, "cross_entropy")?;
        check_labels(labels, weights, b, k, "cross_entropy")?;
        let mut probs = vec![T::zero(); b * k];
        let mut total = 0.0f64;
        for i in 0..b {
            let row = lv.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
            let z: f64 = row.iter().map(|&v| (v.as_f64() - m).exp()).sum();
            let lse = m + z.ln();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = T::of((v.as_f64() - lse).exp());
            }
            total += weights[i].as_f64() * (lse - row[labels[i]].as_f64());
        }
        let value = Tensor::scalar(T::of(total));
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Weighted classification margin: `sum_i w_i * (f_{y_i} - max_{j != y_i} f_j)`.
    pub fn margin(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = matrix_dims(lv, "margin")?;
        if k < 2 {
            return Err(Error::shape("margin", "need at least two classes"));
        }
        check_labels(labels, weights, b, k, "margin")?;
        let mut runner_up = Vec::with_capacity(b);
        let mut total = T::zero();
        for i in 0..b {
            let row = lv.row(i);
            let r = runner_up_index(row, labels[i]);
            runner_up.push(r);
            total += weights[i] * (row[labels[i]] - row[r]);
        }
        self.push(
            "margin",
            Tensor::scalar(total),
            Op::Margin { logits, labels: labels.to_vec(), weights: weights.to_vec(), runner_up },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().map(|&v| v * v).sum());
        self.push("sum_squares", value, Op::SumSquares(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "dot")?;
        let value = Tensor::scalar(self.value(a).dot(self.value(b)));
        self.push("dot", value, Op::Dot(a, b))
    }

    /// Reverse sweep from the scalar `loss`, returning `d loss / d target` for each target.
    ///
    /// A target the loss does not depend on gets a zero gradient and is flagged unreachable.
    pub fn backward(&self, loss: Var, targets: &[Var]) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n = loss.0 + 1;
        let mut needs = vec![false; n];
        for t in targets {
            if t.0 < n {
                needs[t.0] = true;
            }
        }
        for i in 0..n {
            if !needs[i] && self.nodes[i].op.operands().iter().any(|o| needs[o.0]) {
                needs[i] = true;
            }
        }

        let mut adj: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if needs[loss.0] {
            adj[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].op.operands().is_empty() {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &needs, &mut adj);
            // Keep adjoints of targets that are interior nodes.
            if targets.iter().any(|t| t.0 == i) {
                adj[i] = Some(g);
            }
        }

        let mut entries = Vec::with_capacity(targets.len());
        for &t in targets {
            let shape = self.nodes[t.0].value.shape().to_vec();
            let (grad, reachable) = match adj.get(t.0).and_then(|a| a.clone()) {
                Some(g) => (Tensor::new(shape, g)?, true),
                None => (Tensor::zeros(&shape), false),
            };
            if !grad.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            entries.push(GradEntry { var: t, grad, reachable });
        }
        Ok(Gradients { entries })
    }

    fn propagate(&self, i: usize, g: &[T], needs: &[bool], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let accumulate = |adj: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>| match &mut adj[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        let need = |v: &Var| needs[v.0];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(MatRef::new(g, m, n), MatRef::new(bv.data(), k, n).t(), T::zero(), &mut da);
                    accumulate(adj, *a, da);
                }
                if need(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(g, m, n), T::zero(), &mut db);
                    accumulate(adj, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if need(x) {
                    accumulate(adj, *x, g.to_vec());
                }
                if need(b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if need(b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if need(b) {
                    accumulate(adj, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if need(a) {
                    accumulate(adj, *a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if need(b) {
                    accumulate(adj, *b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(a, c) => {
                if need(a) {
                    accumulate(adj, *a, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Relu(a) => {
                if need(a) {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(adj, *a, d);
                }
            }
            Op::Tanh(a) => {
                if need(a) {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(&d, &y)| d * (T::one() - y * y)).collect();
                    accumulate(adj, *a, d);
                }
            }
            Op::Reshape(a) => {
                if need(a) {
                    accumulate(adj, *a, g.to_vec());
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let hw = geom.out_h * geom.out_w;
                let ckk = geom.in_c * geom.k * geom.k;
                let in_len = geom.in_c * geom.h * geom.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dw = if need(w) { Some(vec![T::zero(); geom.out_c * ckk]) } else { None };
                let mut dx = if need(x) { Some(vec![T::zero(); geom.batch * in_len]) } else { None };
                let mut cols = vec![T::zero(); ckk * hw];
                let mut dcols = vec![T::zero(); ckk * hw];
                for bi in 0..geom.batch {
                    let go = &g[bi * geom.out_c * hw..(bi + 1) * geom.out_c * hw];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[bi * in_len..(bi + 1) * in_len], geom, &mut cols);
                        gemm(
                            MatRef::new(go, geom.out_c, hw),
                            MatRef::new(&cols, ckk, hw).t(),
                            T::one(),
                            dw,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            MatRef::new(wv, geom.out_c, ckk).t(),
                            MatRef::new(go, geom.out_c, hw),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, geom, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if let Some(dw) = dw {
                    accumulate(adj, *w, dw);
                }
                if let Some(dx) = dx {
                    accumulate(adj, *x, dx);
                }
                if need(b) {
                    let mut db = vec![T::zero(); geom.out_c];
                    for bi in 0..geom.batch {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let start = (bi * geom.out_c + oc) * hw;
                            *d += g[start..start + hw].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(adj, *b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if need(x) {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &d) in argmax.iter().zip(g) {
                        dx[src] += d;
                    }
                    accumulate(adj, *x, dx);
                }
            }
            Op::CrossEntropy { logits, labels, weights, probs } => {
                if need(logits) {
                    let k = self.value(*logits).shape()[1];
                    let mut d = vec![T::zero(); probs.len()];
                    for (i, (&y, &wi)) in labels.iter().zip(weights).enumerate() {
                        let s = g[0] * wi;
                        for j in 0..k {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            d[i * k + j] = s * (probs[i * k + j] - onehot);
                        }
                    }
                    accumulate(adj, *logits, d);
                }
            }
            Op::Margin { logits, labels, weights, runner_up } => {
                if need(logits) {
                    let k = self.value(*logits).shape()[1];
                    let mut d = vec![T::zero(); self.value(*logits).len()];
                    for (i, ((&y, &r), &wi)) in labels.iter().zip(runner_up).zip(weights).enumerate() {
                        d[i * k + y] += g[0] * wi;
                        d[i * k + r] -= g[0] * wi;
                    }
                    accumulate(adj, *logits, d);
                }
            }
            Op::Sum(a) => {
                if need(a) {
                    accumulate(adj, *a, vec![g[0]; self.value(*a).len()]);
                }
            }
            Op::SumSquares(a) => {
                if need(a) {
                    let two = T::of(2.0);
                    let d = self.value(*a).data().iter().map(|&x| two * x * g[0]).collect();
                    accumulate(adj, *a, d);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if need(a) {
                    accumulate(adj, *a, bv.iter().map(|&y| y * g[0]).collect());
                }
                if need(b) {
                    accumulate(adj, *b, av.iter().map(|&x| x * g[0]).collect());
                }
            }
        }
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    entries: Vec<GradEntry<T>>,
}

struct GradEntry<T: Scalar> {
    var: Var,
    grad: Tensor<T>,
    reachable: bool,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` was not requested as a target.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.var == v).map(|e| &e.grad)
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        self.entries.iter().any(|e| e.var == v && e.reachable)
    }

    /// Gradients in target order.
    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.entries.into_iter().map(|e| e.grad).collect()
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [b, k] => Ok((*b, *k)),
        s => Err(Error::shape(op, format!("expected [batch, classes], got {s:?}"))),
    }
}

fn check_labels<T>(labels: &[usize], weights: &[T], b: usize, k: usize, op: &'static str) -> Result<()> {
    if labels.len() != b || weights.len() != b {
        return Err(Error::shape(
            op,
            format!("{} labels / {} weights for batch {b}", labels.len(), weights.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("{op}: label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Index of the largest entry other than `y` (lowest index wins ties).
pub(crate) fn runner_up_index<T: Scalar>(row: &[T], y: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if j != y && (best == usize::MAX || v > row[best]) {
            best = j;
        }
    }
    best
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.out_h * g.out_w;
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.out_h {
                    let ii = (oi + ki) as isize - g.pad as isize;
                    for oj in 0..g.out_w {
                        let jj = (oj + kj) as isize - g.pad as isize;
                        dst[oi * g.out_w + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                            x[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.out_h * g.out_w;
    for c in 0..g.in_c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.out_h {
                    let ii = (oi + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dx[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}
