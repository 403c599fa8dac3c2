use std::collections::HashMap;
use std::sync::Arc;

use super::ops;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Relu,
    Gelu,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Kron(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Unary(Var, Unary),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, index: usize },
    MulConst { x: Var, factor: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of one forward pass.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it and the backward sweep is simply the reverse of insertion order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass, if `v` was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter from `store` as a leaf. Repeated requests for the
    /// same parameter return the same handle so gradients accumulate once.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.value_arc(id);
        let v = self.push_arc(value, Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b)).map_err(|e| match e {
            Error::Dimension { .. } => dim_err("matmul", self.shape(a), self.shape(b)),
            other => other,
        })?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).kron(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Kron(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a constant tensor (e.g. an attention mask); gradient passes to `a` only.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let k = self.constant(c.clone());
        self.add(a, k)
    }

    /// Multiplies elementwise by a constant factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Result<Var> {
        let va = self.value(a);
        if factor.len() != va.numel() {
            return Err(dim_err("mul_const", va.shape(), &[factor.len()]));
        }
        let data = va.data().iter().zip(&factor).map(|(&x, &f)| x * f).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst { x: a, factor }, rg))
    }

    /// `x[r×c] + b[c]` broadcast over rows; a rank-1 `x` is treated as one row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let cols = *vx.shape().last().unwrap_or(&0);
        if vb.rank() != 1 || vb.numel() != cols {
            return Err(dim_err("add_row", vx.shape(), vb.shape()));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % cols])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = match kind {
            Unary::Tanh => self.value(x).map(|v| v.tanh()),
            Unary::Relu => self.value(x).map(|v| v.max(T::zero())),
            Unary::Gelu => self.value(x).map(ops::gelu),
        };
        let rg = self.rg(x);
        self.push(out, Op::Unary(x, kind), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                len: vx.rank(),
            });
        }
        let data = ops::softmax_axis(vx.data(), vx.shape(), axis);
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let axis = vx.rank().checked_sub(1).ok_or_else(|| dim_err("log_softmax", vx.shape(), &[]))?;
        let (outer, len, _) = ops::axis_split(vx.shape(), axis);
        let mut data = vx.data().to_vec();
        for o in 0..outer {
            let row = &mut data[o * len..(o + 1) * len];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(dim_err("layer_norm", vx.shape(), &[0]));
        }
        let (vg, vs) = (self.value(gain), self.value(shift));
        if vg.shape() != [d] || vs.shape() != [d] {
            return Err(dim_err("layer_norm", vx.shape(), vg.shape()));
        }
        let rows = vx.numel() / d;
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * vg.data()[j] + vs.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.data().iter().copied().sum::<T>() / T::from_f64(vx.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("transpose")?;
        let out = Tensor::from_fn(&[c, r], |i| vx.at2(i % r, i / r));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("slice_rows")?;
        if start + len > r {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let out = Tensor::new(vec![len, c], vx.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2("slice_cols")?;
        if start + len > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let out = Tensor::from_fn(&[r, len], |i| vx.at2(i / len, start + i % len));
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, c) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            let (r, pc) = vp.dims2("concat_rows")?;
            if pc != c {
                return Err(dim_err("concat_rows", self.shape(first), vp.shape()));
            }
            rows += r;
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row lookup `table[ids[i]]` producing `[ids.len() × cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, c) = vt.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocab { id, vocab: rows });
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Single element at a flat index, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let vx = self.value(x);
        let v = *vx.data().get(index).ok_or(Error::Index {
            what: "pick",
            index,
            len: vx.numel(),
        })?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    /// Clears gradients so the tape can be differentiated again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, v: Var, contrib: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, &c) in g.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        let out = Arc::clone(&self.nodes[i].value);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[b.0].value));
                let (p, q) = (va.shape()[0], va.shape()[1]);
                let r = vb.shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); p * q];
                    ops::gemm_nt_acc(g, vb.data(), &mut ga, p, q, r);
                    self.accumulate(*a, &ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); q * r];
                    ops::gemm_tn_acc(va.data(), g, &mut gb, p, q, r);
                    self.accumulate(*b, &gb);
                }
            }
            Op::Kron(a, b) => {
                let (va, vb) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[b.0].value));
                let (p, q) = (va.shape()[0], va.shape()[1]);
                let (r, s) = (vb.shape()[0], vb.shape()[1]);
                let cols = q * s;
                let mut ga = vec![T::zero(); p * q];
                let mut gb = vec![T::zero(); r * s];
                for ii in 0..p {
                    for j in 0..q {
                        let aij = va.data()[ii * q + j];
                        for k in 0..r {
                            let start = (ii * r + k) * cols + j * s;
                            let g_seg = &g[start..start + s];
                            let b_row = &vb.data()[k * s..(k + 1) * s];
                            ga[ii * q + j] = ga[ii * q + j] + ops::dot(g_seg, b_row);
                            ops::axpy(&mut gb[k * s..(k + 1) * s], aij, g_seg);
                        }
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (Arc::clone(&self.nodes[a.0].value), Arc::clone(&self.nodes[b.0].value));
                if self.rg(*a) {
                    let ga: Vec<T> = g.iter().zip(vb.data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(*a, &ga);
                }
                if self.rg(*b) {
                    let gb: Vec<T> = g.iter().zip(va.data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(*b, &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&v| v * *c).collect();
                self.accumulate(*a, &ga);
            }
            Op::MulConst { x, factor } => {
                let gx: Vec<T> = g.iter().zip(factor).map(|(&v, &f)| v * f).collect();
                self.accumulate(*x, &gx);
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, g);
                if self.rg(*b) {
                    let cols = self.nodes[b.0].value.numel();
                    let mut gb = vec![T::zero(); cols];
                    for (k, &v) in g.iter().enumerate() {
                        gb[k % cols] = gb[k % cols] + v;
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::Unary(x, kind) => {
                let vx = Arc::clone(&self.nodes[x.0].value);
                let gx: Vec<T> = match kind {
                    Unary::Tanh => g
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * (T::one() - y * y))
                        .collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(vx.data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(vx.data())
                        .map(|(&gv, &xv)| gv * ops::gelu_grad(xv))
                        .collect(),
                };
                self.accumulate(*x, &gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = ops::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + ii;
                        let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::LogSoftmax(x) => {
                let len = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..y.len() / len.max(1) {
                    let r = o * len..(o + 1) * len;
                    let gs: T = g[r.clone()].iter().copied().sum();
                    for k in r {
                        gx[k] = g[k] - y[k].exp() * gs;
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let vg = Arc::clone(&self.nodes[gain.0].value);
                let d = vg.numel();
                let rows = xhat.len() / d;
                let dn = T::from_f64(d as f64);
                if self.rg(*gain) {
                    let mut gg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.accumulate(*gain, &gg);
                }
                if self.rg(*shift) {
                    let mut gs = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gs[j] = gs[j] + g[r * d + j];
                        }
                    }
                    self.accumulate(*shift, &gs);
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let dxhat: Vec<T> = (0..d).map(|j| g[base + j] * vg.data()[j]).collect();
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = (0..d).map(|j| dxhat[j] * xhat[base + j]).sum::<T>() / dn;
                        for j in 0..d {
                            gx[base + j] = rstd[r] * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                    self.accumulate(*x, &gx);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(*x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(*x, &vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Reshape(x) => self.accumulate(*x, g),
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                // out is [r×c]; x is [c×r]
                let gx: Vec<T> = (0..r * c).map(|k| g[(k % r) * c + k / r]).collect();
                self.accumulate(*x, &gx);
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let vx = Arc::clone(&self.nodes[x.0].value);
                    let c = vx.shape()[1];
                    let mut gx = vec![T::zero(); vx.numel()];
                    gx[start * c..start * c + g.len()].copy_from_slice(g);
                    self.accumulate(*x, &gx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let vx = Arc::clone(&self.nodes[x.0].value);
                    let c = vx.shape()[1];
                    let len = out.shape()[1];
                    let mut gx = vec![T::zero(); vx.numel()];
                    for (k, &gv) in g.iter().enumerate() {
                        gx[(k / len) * c + start + k % len] = gv;
                    }
                    self.accumulate(*x, &gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(*p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut col = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.rg(*p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        self.accumulate(*p, &gp);
                    }
                    col += w;
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let vt = Arc::clone(&self.nodes[table.0].value);
                    let c = vt.shape()[1];
                    let mut gt = vec![T::zero(); vt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] = gt[id * c + j] + g[r * c + j];
                        }
                    }
                    self.accumulate(*table, &gt);
                }
            }
            Op::Pick { x, index } => {
                let n = self.nodes[x.0].value.numel();
                let mut gx = vec![T::zero(); n];
                gx[*index] = g[0];
                self.accumulate(*x, &gx);
            }
        }
    }
}
