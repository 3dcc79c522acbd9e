//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{attention_backward, attention_forward, gemm, softmax_rows, View, ATTN_KEEP_LIMIT};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{nearest, Point3};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChamferKind {
    /// Half the sum of directional mean Euclidean distances.
    L1,
    /// Sum of directional mean squared distances.
    L2,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    GroupSoftmax { x: Var, group: usize },
    GroupSum { x: Var, group: usize },
    GroupMax { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Gather { x: Var, idx: Arc<Vec<usize>> },
    RepeatRows { x: Var, r: usize },
    BroadcastRows(Var),
    PointAffine { p: Var, a: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Option<Vec<f64>>,
    },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Chamfer {
        p: Var,
        q: Var,
        kind: ChamferKind,
        p_to_q: Vec<usize>,
        q_to_p: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn as_points(t: &Tensor) -> Vec<Point3> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn col_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose first nodes are the store's parameters, in store order,
    /// so that `ParamId(i)` binds to `Var(i)`.
    pub fn with_params(store: &ParamStore, requires_grad: bool) -> Self {
        let mut g = Self::new();
        for p in store.iter() {
            g.leaf(p.value.clone(), requires_grad);
        }
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        debug_assert!(id.0 < self.nodes.len());
        Var(id.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- operators -------------------------------------------------------

    /// `x[n, c_in] * w[c_in, c_out] + b[c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, ci) = self.matrix(x, "linear")?;
        let (wi, co) = self.matrix(w, "linear")?;
        if ci != wi {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(Error::shape("linear bias", self.shape(w), self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * co];
        gemm(
            n,
            ci,
            co,
            1.0,
            View::rowmajor(self.value(x).data(), ci),
            View::rowmajor(self.value(w).data(), co),
            0.0,
            &mut out,
            0,
            co,
            1,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(co) {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::raw(vec![n, co], out), Op::Linear { x, w, b }, &inputs))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::raw(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a single row (`[1, c]` or `[c]`) to every row of `x[n, c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, c) = self.matrix(x, "add_row")?;
        if self.value(row).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        Ok(self.push(Tensor::raw(vec![n, c], data), Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::raw(shape, data), Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::raw(shape, data), Op::Relu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        softmax_rows(&mut data, c);
        let shape = t.shape().to_vec();
        self.push(Tensor::raw(shape, data), Op::Softmax(x), &[x])
    }

    /// Per-column softmax across each block of `group` consecutive rows of `x[n*group, c]`.
    pub fn group_softmax(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.matrix(x, "group_softmax")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_softmax", self.shape(x), &[group]));
        }
        let src = self.value(x).data();
        let mut data = src.to_vec();
        for blk in data.chunks_exact_mut(group * c) {
            for j in 0..c {
                let mut mx = f64::NEG_INFINITY;
                for r in 0..group {
                    mx = mx.max(blk[r * c + j]);
                }
                let mut s = 0.0;
                for r in 0..group {
                    let e = (blk[r * c + j] - mx).exp();
                    blk[r * c + j] = e;
                    s += e;
                }
                for r in 0..group {
                    blk[r * c + j] /= s;
                }
            }
        }
        Ok(self.push(Tensor::raw(vec![rows, c], data), Op::GroupSoftmax { x, group }, &[x]))
    }

    /// Sums each block of `group` consecutive rows: `[n*group, c] -> [n, c]`.
    pub fn group_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.matrix(x, "group_sum")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_sum", self.shape(x), &[group]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; rows / group * c];
        for (o, blk) in out.chunks_exact_mut(c).zip(src.chunks_exact(group * c)) {
            for row in blk.chunks_exact(c) {
                for (a, b) in o.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        Ok(self.push(Tensor::raw(vec![rows / group, c], out), Op::GroupSum { x, group }, &[x]))
    }

    /// Channel-wise max over each block of `group` rows, recording the argmax
    /// row for the backward pass. The first maximal row wins ties.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.matrix(x, "group_max")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_max", self.shape(x), &[group]));
        }
        let src = self.value(x).data();
        let n = rows / group;
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for g in 0..n {
            for r in 0..group {
                let row = g * group + r;
                for j in 0..c {
                    let v = src[row * c + j];
                    if v > out[g * c + j] || r == 0 {
                        out[g * c + j] = v;
                        argmax[g * c + j] = row;
                    }
                }
            }
        }
        Ok(self.push(Tensor::raw(vec![n, c], out), Op::GroupMax { x, argmax }, &[x]))
    }

    /// Max over the point (row) axis: `[n, c] -> [1, c]`.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.matrix(x, "max_pool")?;
        self.group_max(x, n)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (n, _) = self.matrix(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.matrix(x, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::raw(vec![n, total], out), Op::ConcatCols(xs.to_vec()), xs))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, c) = self.matrix(xs[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, cc) = self.matrix(x, "concat_rows")?;
            if cc != c {
                return Err(Error::shape("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        Ok(self.push(Tensor::raw(vec![rows, c], out), Op::ConcatRows(xs.to_vec()), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push(Tensor::raw(shape.to_vec(), data), Op::Reshape(x), &[x]))
    }

    /// Rows of `x` at `idx`, in order; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", self.shape(x), &[0]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let m = idx.len();
        Ok(self.push(Tensor::raw(vec![m, c], out), Op::Gather { x, idx }, &[x]))
    }

    /// Each row repeated `r` times consecutively: row `i` fills rows `i*r .. i*r + r`.
    pub fn repeat_rows(&mut self, x: Var, r: usize) -> Result<Var> {
        let (n, c) = self.matrix(x, "repeat_rows")?;
        if r == 0 {
            return Err(Error::shape("repeat_rows", self.shape(x), &[r]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * r * c);
        for row in src.chunks_exact(c) {
            for _ in 0..r {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(Tensor::raw(vec![n * r, c], out), Op::RepeatRows { x, r }, &[x]))
    }

    /// Tiles a single row `[1, c]` to `[n, c]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "broadcast_rows")?;
        if r != 1 || n == 0 {
            return Err(Error::shape("broadcast_rows", self.shape(x), &[n, c]));
        }
        let row = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        Ok(self.push(Tensor::raw(vec![n, c], out), Op::BroadcastRows(x), &[x]))
    }

    /// Row-vector batched 3x3 product: `out[i] = p[i] * A[i]` with `a[i]` the
    /// row-major flattening of `A[i]` (`p: [n, 3]`, `a: [n, 9]`).
    pub fn point_affine(&mut self, p: Var, a: Var) -> Result<Var> {
        let (n, c) = self.matrix(p, "point_affine")?;
        let (na, ca) = self.matrix(a, "point_affine")?;
        if c != 3 || ca != 9 || na != n {
            return Err(Error::shape("point_affine", self.shape(p), self.shape(a)));
        }
        let pd = self.value(p).data();
        let ad = self.value(a).data();
        let mut out = vec![0.0; n * 3];
        for i in 0..n {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += pd[i * 3 + k] * ad[i * 9 + k * 3 + j];
                }
                out[i * 3 + j] = s;
            }
        }
        Ok(self.push(Tensor::raw(vec![n, 3], out), Op::PointAffine { p, a }, &[p, a]))
    }

    /// Multi-head scaled dot-product attention without projections: channels
    /// split into `heads` groups, `softmax(Q K^T / sqrt(c/heads)) V` per group,
    /// re-concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, c) = self.matrix(q, "attention")?;
        let (nk, ck) = self.matrix(k, "attention")?;
        if ck != c {
            return Err(Error::shape("attention (q, k)", self.shape(q), self.shape(k)));
        }
        self.same_shape(k, v, "attention (k, v)")?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("attention heads", self.shape(q), &[heads]));
        }
        let keep = [q, k, v].iter().any(|x| self.nodes[x.0].requires_grad) && heads * nq * nk <= ATTN_KEEP_LIMIT;
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            nq,
            nk,
            c,
            heads,
            keep,
        );
        Ok(self.push(
            Tensor::raw(vec![nq, c], out),
            Op::Attention { q, k, v, heads, probs },
            &[q, k, v],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * v).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::raw(shape, data), Op::Square(x), &[x])
    }

    /// Chamfer distance between two `[n, 3]` point sets. Nearest-neighbour
    /// assignments are fixed in the forward pass; gradients flow through the
    /// matched coordinates.
    pub fn chamfer(&mut self, p: Var, q: Var, kind: ChamferKind) -> Result<Var> {
        let (n, c) = self.matrix(p, "chamfer")?;
        let (m, cq) = self.matrix(q, "chamfer")?;
        if c != 3 || cq != 3 {
            return Err(Error::shape("chamfer", self.shape(p), self.shape(q)));
        }
        let pp = as_points(self.value(p));
        let qq = as_points(self.value(q));
        let pq = nearest(&pp, &qq);
        let qp = nearest(&qq, &pp);
        let value = match kind {
            ChamferKind::L1 => {
                0.5 * (pq.iter().map(|x| x.0.sqrt()).sum::<f64>() / n as f64
                    + qp.iter().map(|x| x.0.sqrt()).sum::<f64>() / m as f64)
            }
            ChamferKind::L2 => {
                pq.iter().map(|x| x.0).sum::<f64>() / n as f64
                    + qp.iter().map(|x| x.0).sum::<f64>() / m as f64
            }
        };
        let op = Op::Chamfer {
            p,
            q,
            kind,
            p_to_q: pq.into_iter().map(|x| x.1).collect(),
            q_to_p: qp.into_iter().map(|x| x.1).collect(),
        };
        Ok(self.push(Tensor::scalar(value), op, &[p, q]))
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. Previously stored gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.shape(loss), &[1]));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &dy);
            }
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        if self.needs(v) {
            add_into(&mut self.grads[v.0], g);
        }
    }

    fn propagate(&mut self, i: usize, dy: &[f64]) {
        // Temporarily move the op out so input values can be borrowed while
        // gradients are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, ci) = (self.shape(*x)[0], self.shape(*x)[1]);
                let co = self.shape(*w)[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * ci];
                    gemm(
                        n,
                        co,
                        ci,
                        1.0,
                        View::rowmajor(dy, co),
                        View::transposed(self.value(*w).data(), co),
                        0.0,
                        &mut dx,
                        0,
                        ci,
                        1,
                    );
                    self.accumulate(*x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; ci * co];
                    gemm(
                        ci,
                        n,
                        co,
                        1.0,
                        View::transposed(self.value(*x).data(), ci),
                        View::rowmajor(dy, co),
                        0.0,
                        &mut dw,
                        0,
                        co,
                        1,
                    );
                    self.accumulate(*w, &dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = col_sums(dy, co);
                        self.accumulate(*b, &db);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, dy);
                if self.needs(*b) {
                    let neg: Vec<f64> = dy.iter().map(|v| -v).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g: Vec<f64> = dy.iter().zip(self.value(*b).data()).map(|(d, y)| d * y).collect();
                    self.accumulate(*a, &g);
                }
                if self.needs(*b) {
                    let g: Vec<f64> = dy.iter().zip(self.value(*a).data()).map(|(d, x)| d * x).collect();
                    self.accumulate(*b, &g);
                }
            }
            Op::AddRow { x, row } => {
                self.accumulate(*x, dy);
                if self.needs(*row) {
                    let c = self.value(*row).len();
                    let g = col_sums(dy, c);
                    self.accumulate(*row, &g);
                }
            }
            Op::Scale(x, s) => {
                let g: Vec<f64> = dy.iter().map(|d| d * s).collect();
                self.accumulate(*x, &g);
            }
            Op::Relu(x) => {
                let g: Vec<f64> = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(*x, &g);
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.cols();
                let mut g = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(dy.chunks_exact(c)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((o, yv), dv) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = yv * (dv - dot);
                    }
                }
                self.accumulate(*x, &g);
            }
            Op::GroupSoftmax { x, group } => {
                let y = self.nodes[i].value.data();
                let c = self.nodes[i].value.cols();
                let group = *group;
                let mut g = vec![0.0; y.len()];
                for ((gb, yb), db) in g
                    .chunks_exact_mut(group * c)
                    .zip(y.chunks_exact(group * c))
                    .zip(dy.chunks_exact(group * c))
                {
                    for j in 0..c {
                        let mut dot = 0.0;
                        for r in 0..group {
                            dot += yb[r * c + j] * db[r * c + j];
                        }
                        for r in 0..group {
                            gb[r * c + j] = yb[r * c + j] * (db[r * c + j] - dot);
                        }
                    }
                }
                self.accumulate(*x, &g);
            }
            Op::GroupSum { x, group } => {
                let c = self.nodes[i].value.cols();
                let mut g = Vec::with_capacity(dy.len() * group);
                for row in dy.chunks_exact(c) {
                    for _ in 0..*group {
                        g.extend_from_slice(row);
                    }
                }
                self.accumulate(*x, &g);
            }
            Op::GroupMax { x, argmax } => {
                if self.needs(*x) {
                    let c = self.nodes[i].value.cols();
                    let mut g = vec![0.0; self.value(*x).len()];
                    for (k, (&row, d)) in argmax.iter().zip(dy).enumerate() {
                        g[row * c + k % c] += d;
                    }
                    self.accumulate(*x, &g);
                }
            }
            Op::ConcatCols(xs) => {
                let n = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    if self.needs(x) {
                        let mut g = Vec::with_capacity(n * w);
                        for r in 0..n {
                            g.extend_from_slice(&dy[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(x, &g);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    self.accumulate(x, &dy[off..off + len]);
                    off += len;
                }
            }
            Op::Reshape(x) => self.accumulate(*x, dy),
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let c = self.nodes[i].value.cols();
                    let mut g = vec![0.0; self.value(*x).len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[src * c + j] += dy[r * c + j];
                        }
                    }
                    self.accumulate(*x, &g);
                }
            }
            Op::RepeatRows { x, r } => {
                let c = self.nodes[i].value.cols();
                let n = self.value(*x).rows();
                let mut g = vec![0.0; n * c];
                for (k, row) in dy.chunks_exact(c).enumerate() {
                    let dst = k / r;
                    for j in 0..c {
                        g[dst * c + j] += row[j];
                    }
                }
                self.accumulate(*x, &g);
            }
            Op::BroadcastRows(x) => {
                let c = self.nodes[i].value.cols();
                let g = col_sums(dy, c);
                self.accumulate(*x, &g);
            }
            Op::PointAffine { p, a } => {
                let n = self.shape(*p)[0];
                if self.needs(*p) {
                    let ad = self.value(*a).data();
                    let mut g = vec![0.0; n * 3];
                    for r in 0..n {
                        for k in 0..3 {
                            let mut s = 0.0;
                            for j in 0..3 {
                                s += dy[r * 3 + j] * ad[r * 9 + k * 3 + j];
                            }
                            g[r * 3 + k] = s;
                        }
                    }
                    self.accumulate(*p, &g);
                }
                if self.needs(*a) {
                    let pd = self.value(*p).data();
                    let mut g = vec![0.0; n * 9];
                    for r in 0..n {
                        for k in 0..3 {
                            for j in 0..3 {
                                g[r * 9 + k * 3 + j] = pd[r * 3 + k] * dy[r * 3 + j];
                            }
                        }
                    }
                    self.accumulate(*a, &g);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (nq, c) = (self.shape(*q)[0], self.shape(*q)[1]);
                let nk = self.shape(*k)[0];
                let grads = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs.as_deref(),
                    dy,
                    nq,
                    nk,
                    c,
                    *heads,
                );
                self.accumulate(*q, &grads.dq);
                self.accumulate(*k, &grads.dk);
                self.accumulate(*v, &grads.dv);
            }
            Op::Sum(x) => {
                let g = vec![dy[0]; self.value(*x).len()];
                self.accumulate(*x, &g);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g = vec![dy[0] / n as f64; n];
                self.accumulate(*x, &g);
            }
            Op::Square(x) => {
                let g: Vec<f64> = dy.iter().zip(self.value(*x).data()).map(|(d, v)| 2.0 * d * v).collect();
                self.accumulate(*x, &g);
            }
            Op::Chamfer {
                p,
                q,
                kind,
                p_to_q,
                q_to_p,
            } => {
                let pd = self.value(*p).data();
                let qd = self.value(*q).data();
                let n = p_to_q.len();
                let m = q_to_p.len();
                let mut gp = vec![0.0; n * 3];
                let mut gq = vec![0.0; m * 3];
                // d/dx of one directional term for the pair (x, y), weighted.
                let pair = |x: &[f64], y: &[f64], w: f64| -> [f64; 3] {
                    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
                    match kind {
                        ChamferKind::L1 => {
                            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                            if len > 0.0 {
                                [w * d[0] / len, w * d[1] / len, w * d[2] / len]
                            } else {
                                [0.0; 3]
                            }
                        }
                        ChamferKind::L2 => [2.0 * w * d[0], 2.0 * w * d[1], 2.0 * w * d[2]],
                    }
                };
                let half = if *kind == ChamferKind::L1 { 0.5 } else { 1.0 };
                let wp = dy[0] * half / n as f64;
                let wq = dy[0] * half / m as f64;
                for (a, &b) in p_to_q.iter().enumerate() {
                    let g = pair(&pd[a * 3..a * 3 + 3], &qd[b * 3..b * 3 + 3], wp);
                    for t in 0..3 {
                        gp[a * 3 + t] += g[t];
                        gq[b * 3 + t] -= g[t];
                    }
                }
                for (b, &a) in q_to_p.iter().enumerate() {
                    let g = pair(&qd[b * 3..b * 3 + 3], &pd[a * 3..a * 3 + 3], wq);
                    for t in 0..3 {
                        gq[b * 3 + t] += g[t];
                        gp[a * 3 + t] -= g[t];
                    }
                }
                self.accumulate(*p, &gp);
                self.accumulate(*q, &gq);
            }
        }
        self.nodes[i].op = op;
    }
}
