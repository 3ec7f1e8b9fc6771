//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded in execution order, so the tape is topologically
//! sorted by construction. [`Tape::backward`] walks it once in reverse,
//! propagating adjoints only through nodes that depend on a parameter leaf.
//!
//! Shapes are explicit. The only broadcasting forms are the named ones:
//! [`Tape::add_row`] (bias rows), [`Tape::mul_rows`]/[`Tape::scale_rows`]
//! (one factor per leading index) and [`Tape::outer`] (per-row outer product).

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{axis_blocks, numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Elementwise, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Rc<[f64]>),
    MulRows(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Sum { src: Var, axis: usize },
    SumAll(Var),
    /// Keeps `sigmoid(x)` for the backward pass when gradients are needed.
    Silu(Var, Vec<f64>),
    Gather { src: Var, index: Rc<[usize]> },
    ScatterAdd { src: Var, index: Rc<[usize]> },
    ChannelSqnorms(Var),
    BatchedMatMul(Var, Var),
    Outer(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, var: Var) -> Vec<f64> {
        let n = numel(&self.shapes[var.0]);
        self.grads[var.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m,n] += A[m,k] * B[k,n]` for strided `A` and `B` and a contiguous
/// row-major `out`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(out.len() >= m * n);
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[r,c] += a[r,k] * b[k,c]`, for the tiny per-edge products.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k,c] += a[r,k]^T * g[r,c]`
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `[r,k] x [k,c] -> [r,c]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; r * c];
        gemm(r, k, c, self.value(a).data(), (k, 1), self.value(b).data(), (c, 1), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("elementwise", a, b));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match kind {
            Elementwise::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Elementwise::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Elementwise::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    /// `x[r,c] + b[c]` for every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(self.mismatch("add_row", x, b));
        }
        let c = sb[0];
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        if c > 0 {
            for row in out.chunks_exact_mut(c) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, s), rg))
    }

    /// Multiplies each leading-axis block by a constant factor.
    pub fn scale_rows(&mut self, a: Var, factors: Rc<[f64]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape[0] != factors.len() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: shape,
                rhs: vec![factors.len()],
            });
        }
        let block = numel(&shape[1..]);
        let mut out = self.value(a).data().to_vec();
        if block > 0 {
            for (row, &f) in out.chunks_exact_mut(block).zip(factors.iter()) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ScaleRows(a, factors), rg))
    }

    /// Multiplies each leading-axis block of `x` by the matching entry of `s`,
    /// where `s` holds exactly one value per leading index (`[r]` or `[r,1]`).
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.value(s).len() != shape[0] || self.shape(s)[0] != shape[0] {
            return Err(self.mismatch("mul_rows", x, s));
        }
        let block = numel(&shape[1..]);
        let factors = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        if block > 0 {
            for (row, &f) in out.chunks_exact_mut(block).zip(factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MulRows(x, s), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", first, p));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        if axis >= src_shape.len() || range.start > range.end || range.end > src_shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {range:?} on axis {axis} of shape {src_shape:?}"
            )));
        }
        let (outer, extent, inner) = axis_blocks(&src_shape, axis);
        let width = (range.end - range.start) * inner;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * extent * inner + range.start * inner;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut shape = src_shape;
        shape[axis] = range.end - range.start;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice {
                src: a,
                axis,
                start: range.start,
            },
            rg,
        ))
    }

    /// Sums out `axis`; the result drops that axis.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        if axis >= src_shape.len() {
            return Err(Error::InvalidArgument(format!(
                "sum axis {axis} out of range for shape {src_shape:?}"
            )));
        }
        let (outer, extent, inner) = axis_blocks(&src_shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = src_shape;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sum { src: a, axis }, rg))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total), Op::SumAll(a), rg))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let rg = self.rg(a);
        let xs = self.value(a).data();
        let sig: Vec<f64> = xs.iter().map(|&x| sigmoid(x)).collect();
        let out = xs.iter().zip(&sig).map(|(x, s)| x * s).collect();
        let shape = self.shape(a).to_vec();
        let saved = if rg { sig } else { Vec::new() };
        Ok(self.push(Tensor::new(&shape, out)?, Op::Silu(a, saved), rg))
    }

    /// Selects leading-axis rows: `out[e] = src[index[e]]`.
    pub fn gather(&mut self, src: Var, index: Rc<[usize]>) -> Result<Var> {
        let src_shape = self.shape(src).to_vec();
        if src_shape.is_empty() {
            return Err(Error::InvalidArgument("gather from a rank-0 tensor".into()));
        }
        let n = src_shape[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {n} rows"
            )));
        }
        let block = numel(&src_shape[1..]);
        let data = self.value(src).data();
        let mut out = Vec::with_capacity(index.len() * block);
        for &i in index.iter() {
            out.extend_from_slice(&data[i * block..(i + 1) * block]);
        }
        let mut shape = src_shape;
        shape[0] = index.len();
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gather { src, index }, rg))
    }

    /// Sums leading-axis rows into `n` buckets: `out[index[e]] += src[e]`.
    /// Rows are added in their order in `src`.
    pub fn scatter_add(&mut self, src: Var, index: Rc<[usize]>, n: usize) -> Result<Var> {
        let src_shape = self.shape(src).to_vec();
        if src_shape.is_empty() || src_shape[0] != index.len() {
            return Err(Error::InvalidArgument(format!(
                "scatter_add of shape {src_shape:?} with {} indices",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "scatter index {bad} out of range for {n} buckets"
            )));
        }
        let block = numel(&src_shape[1..]);
        let data = self.value(src).data();
        let mut out = vec![0.0; n * block];
        for (e, &i) in index.iter().enumerate() {
            let dst = &mut out[i * block..(i + 1) * block];
            for (d, &s) in dst.iter_mut().zip(&data[e * block..(e + 1) * block]) {
                *d += s;
            }
        }
        let mut shape = src_shape;
        shape[0] = n;
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ScatterAdd { src, index }, rg))
    }

    /// `[e, d, m] -> [e, m]`, entry `(e, c) = sum_d X[e,d,c]^2`.
    pub fn channel_sqnorms(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "channel_sqnorms expects [edges, dim, channels], got {s:?}"
            )));
        }
        let (e, d, m) = (s[0], s[1], s[2]);
        let data = self.value(x).data();
        let mut out = vec![0.0; e * m];
        for k in 0..e {
            let dst = &mut out[k * m..(k + 1) * m];
            for a in 0..d {
                let row = &data[(k * d + a) * m..(k * d + a + 1) * m];
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += v * v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[e, m], out)?, Op::ChannelSqnorms(x), rg))
    }

    /// Per-batch matrix product `[b,p,q] x [b,q,r] -> [b,p,r]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.mismatch("batched_matmul", a, b));
        }
        let (n, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * p * r];
        for k in 0..n {
            gemm_acc(
                &x[k * p * q..(k + 1) * p * q],
                &y[k * q * r..(k + 1) * q * r],
                &mut out[k * p * r..(k + 1) * p * r],
                p,
                q,
                r,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, p, r], out)?, Op::BatchedMatMul(a, b), rg))
    }

    /// Per-row outer product `[b,p] x [b,r] -> [b,p,r]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(self.mismatch("outer", a, b));
        }
        let (n, p, r) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * p * r);
        for k in 0..n {
            let yrow = &y[k * r..(k + 1) * r];
            for &xv in &x[k * p..(k + 1) * p] {
                out.extend(yrow.iter().map(|&yv| xv * yv));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, p, r], out)?, Op::Outer(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(Error::NonScalarOutput(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if out_node.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let c = self.shape(*b)[1];
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    gemm(r, c, k, g, (c, 1), bv, (1, c), ga);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    gemm(k, r, c, av, (1, k), g, (c, 1), gb);
                }
            }
            Op::Binary(kind, a, b) => {
                if self.rg(*a) {
                    let other = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    match kind {
                        Elementwise::Add | Elementwise::Sub => axpy(ga, g, 1.0),
                        Elementwise::Mul => {
                            for ((d, &gv), &o) in ga.iter_mut().zip(g).zip(other) {
                                *d += gv * o;
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let other = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    match kind {
                        Elementwise::Add => axpy(gb, g, 1.0),
                        Elementwise::Sub => axpy(gb, g, -1.0),
                        Elementwise::Mul => {
                            for ((d, &gv), &o) in gb.iter_mut().zip(g).zip(other) {
                                *d += gv * o;
                            }
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*x) {
                    axpy(self.grad_buf(grads, *x), g, 1.0);
                }
                if self.rg(*b) {
                    let c = self.shape(*b)[0];
                    let gb = self.grad_buf(grads, *b);
                    if c > 0 {
                        for row in g.chunks_exact(c) {
                            axpy(gb, row, 1.0);
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    axpy(self.grad_buf(grads, *a), g, *s);
                }
            }
            Op::ScaleRows(a, factors) => {
                if self.rg(*a) {
                    let block = numel(&self.shape(*a)[1..]);
                    let ga = self.grad_buf(grads, *a);
                    if block > 0 {
                        for ((d, s), &f) in ga
                            .chunks_exact_mut(block)
                            .zip(g.chunks_exact(block))
                            .zip(factors.iter())
                        {
                            axpy(d, s, f);
                        }
                    }
                }
            }
            Op::MulRows(x, s) => {
                let block = numel(&self.shape(*x)[1..]);
                if block == 0 {
                    return;
                }
                if self.rg(*x) {
                    let factors = self.value(*s).data();
                    let gx = self.grad_buf(grads, *x);
                    for ((d, gr), &f) in gx
                        .chunks_exact_mut(block)
                        .zip(g.chunks_exact(block))
                        .zip(factors)
                    {
                        axpy(d, gr, f);
                    }
                }
                if self.rg(*s) {
                    let xv = self.value(*x).data();
                    let gs = self.grad_buf(grads, *s);
                    for ((d, gr), xr) in gs
                        .iter_mut()
                        .zip(g.chunks_exact(block))
                        .zip(xv.chunks_exact(block))
                    {
                        *d += dot(gr, xr);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_blocks(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let gp = self.grad_buf(grads, p);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            axpy(&mut gp[o * len..(o + 1) * len], &g[base..base + len], 1.0);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                if self.rg(*src) {
                    let (outer, extent, inner) = axis_blocks(self.shape(*src), *axis);
                    let width = node.value.shape()[*axis] * inner;
                    let gs = self.grad_buf(grads, *src);
                    for o in 0..outer {
                        let base = o * extent * inner + start * inner;
                        axpy(&mut gs[base..base + width], &g[o * width..(o + 1) * width], 1.0);
                    }
                }
            }
            Op::Sum { src, axis } => {
                if self.rg(*src) {
                    let (outer, extent, inner) = axis_blocks(self.shape(*src), *axis);
                    let gs = self.grad_buf(grads, *src);
                    for o in 0..outer {
                        let gr = &g[o * inner..(o + 1) * inner];
                        for k in 0..extent {
                            let base = (o * extent + k) * inner;
                            axpy(&mut gs[base..base + inner], gr, 1.0);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let gv = g[0];
                    self.grad_buf(grads, *a).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Silu(a, sig) => {
                if self.rg(*a) {
                    let xv = self.value(*a).data();
                    let ga = self.grad_buf(grads, *a);
                    for (((d, &gv), &x), &s) in ga.iter_mut().zip(g).zip(xv).zip(sig) {
                        *d += gv * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::Gather { src, index } => {
                if self.rg(*src) {
                    let block = numel(&self.shape(*src)[1..]);
                    let gs = self.grad_buf(grads, *src);
                    for (e, &i) in index.iter().enumerate() {
                        axpy(
                            &mut gs[i * block..(i + 1) * block],
                            &g[e * block..(e + 1) * block],
                            1.0,
                        );
                    }
                }
            }
            Op::ScatterAdd { src, index } => {
                if self.rg(*src) {
                    let block = numel(&self.shape(*src)[1..]);
                    let gs = self.grad_buf(grads, *src);
                    for (e, &i) in index.iter().enumerate() {
                        axpy(
                            &mut gs[e * block..(e + 1) * block],
                            &g[i * block..(i + 1) * block],
                            1.0,
                        );
                    }
                }
            }
            Op::ChannelSqnorms(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (e, d, m) = (s[0], s[1], s[2]);
                    let xv = self.value(*x).data();
                    let gx = self.grad_buf(grads, *x);
                    for k in 0..e {
                        let gr = &g[k * m..(k + 1) * m];
                        for a in 0..d {
                            let base = (k * d + a) * m;
                            for c in 0..m {
                                gx[base + c] += 2.0 * xv[base + c] * gr[c];
                            }
                        }
                    }
                }
            }
            Op::BatchedMatMul(a, b) => {
                let sa = self.shape(*a);
                let (n, p, q) = (sa[0], sa[1], sa[2]);
                let r = self.shape(*b)[2];
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    for k in 0..n {
                        let bt = transpose(&bv[k * q * r..(k + 1) * q * r], q, r);
                        gemm_acc(
                            &g[k * p * r..(k + 1) * p * r],
                            &bt,
                            &mut ga[k * p * q..(k + 1) * p * q],
                            p,
                            r,
                            q,
                        );
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    for k in 0..n {
                        gemm_tn_acc(
                            &av[k * p * q..(k + 1) * p * q],
                            &g[k * p * r..(k + 1) * p * r],
                            &mut gb[k * q * r..(k + 1) * q * r],
                            p,
                            q,
                            r,
                        );
                    }
                }
            }
            Op::Outer(a, b) => {
                let (n, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let r = self.shape(*b)[1];
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.grad_buf(grads, *a);
                    for k in 0..n {
                        let brow = &bv[k * r..(k + 1) * r];
                        for i in 0..p {
                            let base = (k * p + i) * r;
                            ga[k * p + i] += dot(&g[base..base + r], brow);
                        }
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = self.grad_buf(grads, *b);
                    for k in 0..n {
                        for i in 0..p {
                            let base = (k * p + i) * r;
                            axpy(&mut gb[k * r..(k + 1) * r], &g[base..base + r], av[k * p + i]);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    axpy(self.grad_buf(grads, *a), g, 1.0);
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ac = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(ac).data(), &[17.0, 39.0]);
        assert!(tape.matmul(c, c).is_err());
    }

    #[test]
    fn sum_over_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        assert_eq!(tape.shape(s), &[2]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 4], 2));
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 20.0, 40.0]));
        let y = tape.silu(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 20.0).abs() < 1e-6);
        assert!((v[2] - 40.0).abs() < 1e-6);
    }

    #[test]
    fn channel_sqnorms_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 1], &[1.0, 0.0, 0.0, 3.0, 4.0, 0.0]));
        let n = tape.channel_sqnorms(x).unwrap();
        assert_eq!(tape.value(n).data(), &[1.0, 25.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[5], 3));
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 5]);
    }

    #[test]
    fn backward_of_square_sum_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[5], 3));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = tape.value(x).data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.wrt(x).data(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let unused = tape.param(Tensor::ones(&[3]));
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn scatter_and_gather_are_adjoint() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let idx: Rc<[usize]> = vec![2, 0, 2, 1].into();
        let gathered = tape.gather(x, idx.clone()).unwrap();
        assert_eq!(tape.value(gathered).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0, 3.0, 4.0]);
        let scattered = tape.scatter_add(gathered, idx, 3).unwrap();
        assert_eq!(tape.value(scattered).data(), &[1.0, 2.0, 3.0, 4.0, 10.0, 12.0]);
        let s = tape.sum_all(scattered).unwrap();
        let g = tape.backward(s).unwrap();
        // row 2 is gathered twice
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn outer_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[1, 2], &[10.0, 100.0]));
        let o = tape.outer(a, b).unwrap();
        assert_eq!(tape.shape(o), &[1, 3, 2]);
        assert_eq!(tape.value(o).data(), &[10.0, 100.0, 20.0, 200.0, 30.0, 300.0]);
    }

    #[test]
    fn concat_and_slice_along_last_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 1..3).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
        assert!(tape.concat(&[a, b], 0).is_err());
    }
}
