//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`] handles. Nodes are
//! appended after their inputs, so reverse insertion order is a valid
//! topological order for [`Graph::backward`]. Leaf gradients persist on the
//! graph and accumulate across repeated backward calls until
//! [`Graph::zero_grad`].

use std::cell::RefCell;

use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: receives a gradient on backward.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn input(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(&shape, g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    fn zip_same(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), out)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    fn row_broadcast(&self, name: &'static str, a: Var, r: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(r));
        let n = av.cols();
        if rv.len() != n || av.shape().is_empty() {
            return Err(Error::shape(name, av.shape(), rv.shape()));
        }
        let row = rv.data();
        let out = av
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape(), out)
    }

    /// `a + r` with `r` (length = last dim of `a`) repeated along leading axes.
    pub fn add_row(&self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, r, |x, y| x + y)?;
        self.push("add_row", t, Op::AddRow(a, r), &[a, r])
    }

    pub fn mul_row(&self, a: Var, r: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, r, |x, y| x * y)?;
        self.push("mul_row", t, Op::MulRow(a, r), &[a, r])
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::invalid(format!("softmax axis {axis} for shape {:?}", xv.shape())));
        }
        if !xv.all_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        self.push("softmax", Tensor::new(xv.shape(), out)?, Op::Softmax { x, axis }, &[x])
    }

    /// Normalises to zero mean and unit variance along `axis`:
    /// `(x - mean) / sqrt(var + eps)` with the population variance.
    /// No affine parameters.
    pub fn layer_norm(&self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() || xv.shape()[axis] == 0 {
            return Err(Error::invalid(format!("layer_norm axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mean = (0..len).map(|k| src[idx(k)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|k| (src[idx(k)] - mean).powi(2)).sum::<f64>() / len as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for k in 0..len {
                    out[idx(k)] = (src[idx(k)] - mean) * inv;
                }
                inv_std.push(inv);
            }
        }
        let op = Op::LayerNorm { x, axis, inv_std };
        self.push("layer_norm", Tensor::new(xv.shape(), out)?, op, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::gelu);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if start >= end || end > c {
            return Err(Error::invalid(format!("slice_cols {start}..{end} of width {c}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push("slice_cols", Tensor::new(&[r, w], out)?, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let r = first.dims2()?.0;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (vr, vc) = v.dims2()?;
            if vr != r {
                return Err(Error::shape("concat_cols", first.shape(), v.shape()));
            }
            widths.push(vc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.sum() / v.len().max(1) as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.zip_same("mse", a, b, |x, y| x - y)?;
        let m = d.data().iter().map(|x| x * x).sum::<f64>() / d.len().max(1) as f64;
        self.push("mse", Tensor::scalar(m), Op::Mse(a, b), &[a, b])
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let value = &node.value;
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    let slot = leaf_grads[id].get_or_insert_with(|| vec![0.0; dy.len()]);
                    slot.iter_mut().zip(&dy).for_each(|(s, d)| *s += d);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = av.dims2()?;
                    let n = bv.cols();
                    if needs(a) {
                        let da = kernels::matmul_nt(&dy, bv.data(), m, n, k);
                        acc(*a, &|s| s.iter_mut().zip(&da).for_each(|(s, d)| *s += d));
                    }
                    if needs(b) {
                        let db = kernels::matmul_tn(av.data(), &dy, m, k, n);
                        acc(*b, &|s| s.iter_mut().zip(&db).for_each(|(s, d)| *s += d));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = value.dims2()?;
                    let da = kernels::transpose(&dy, r, c);
                    acc(*a, &|s| s.iter_mut().zip(&da).for_each(|(s, d)| *s += d));
                }
                Op::Add(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&dy).for_each(|(s, d)| *s += d));
                    acc(*b, &|s| s.iter_mut().zip(&dy).for_each(|(s, d)| *s += d));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|s| s.iter_mut().zip(&dy).for_each(|(s, d)| *s += d));
                    acc(*b, &|s| s.iter_mut().zip(&dy).for_each(|(s, d)| *s -= d));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += dy[i] * bv[i];
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] += dy[i] * av[i];
                        }
                    });
                }
                Op::AddRow(a, r) => {
                    acc(*a, &|s| s.iter_mut().zip(&dy).for_each(|(s, d)| *s += d));
                    acc(*r, &|s| {
                        let n = s.len();
                        for chunk in dy.chunks(n) {
                            s.iter_mut().zip(chunk).for_each(|(s, d)| *s += d);
                        }
                    });
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (nodes[a.0].value.data(), nodes[r.0].value.data());
                    let n = rv.len();
                    acc(*a, &|s| {
                        for (i, si) in s.iter_mut().enumerate() {
                            *si += dy[i] * rv[i % n];
                        }
                    });
                    acc(*r, &|s| {
                        for (i, d) in dy.iter().enumerate() {
                            s[i % n] += d * av[i];
                        }
                    });
                }
                Op::Scale(a, k) => {
                    acc(*a, &|s| s.iter_mut().zip(&dy).for_each(|(s, d)| *s += k * d));
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_split(value.shape(), *axis);
                    let y = value.data();
                    acc(*x, &|s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |k: usize| (o * len + k) * inner + i;
                                let dot: f64 = (0..len).map(|k| dy[idx(k)] * y[idx(k)]).sum();
                                for k in 0..len {
                                    s[idx(k)] += y[idx(k)] * (dy[idx(k)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, axis, inv_std } => {
                    let (outer, len, inner) = axis_split(value.shape(), *axis);
                    let y = value.data();
                    let n = len as f64;
                    acc(*x, &|s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |k: usize| (o * len + k) * inner + i;
                                let inv = inv_std[o * inner + i];
                                let mean_dy: f64 = (0..len).map(|k| dy[idx(k)]).sum::<f64>() / n;
                                let mean_dyy: f64 =
                                    (0..len).map(|k| dy[idx(k)] * y[idx(k)]).sum::<f64>() / n;
                                for k in 0..len {
                                    s[idx(k)] += inv * (dy[idx(k)] - mean_dy - y[idx(k)] * mean_dyy);
                                }
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &|s| {
                        for i in 0..s.len() {
                            s[i] += dy[i] * kernels::gelu_grad(xv[i]);
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let w = value.cols();
                    let c = nodes[x.0].value.cols();
                    acc(*x, &|s| {
                        for (r, chunk) in dy.chunks(w).enumerate() {
                            let dst = &mut s[r * c + start..r * c + start + w];
                            dst.iter_mut().zip(chunk).for_each(|(s, d)| *s += d);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(*p, &|s| {
                            for (r, chunk) in s.chunks_mut(w).enumerate() {
                                let src = &dy[r * total + offset..r * total + offset + w];
                                chunk.iter_mut().zip(src).for_each(|(s, d)| *s += d);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Reshape(x) => {
                    acc(*x, &|s| s.iter_mut().zip(&dy).for_each(|(s, d)| *s += d));
                }
                Op::Sum(x) => {
                    let d = dy[0];
                    acc(*x, &|s| s.iter_mut().for_each(|s| *s += d));
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len().max(1) as f64;
                    let d = dy[0] / n;
                    acc(*x, &|s| s.iter_mut().for_each(|s| *s += d));
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let k = 2.0 * dy[0] / av.len().max(1) as f64;
                    acc(*a, &|s| {
                        for i in 0..s.len() {
                            s[i] += k * (av[i] - bv[i]);
                        }
                    });
                    acc(*b, &|s| {
                        for i in 0..s.len() {
                            s[i] -= k * (av[i] - bv[i]);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
