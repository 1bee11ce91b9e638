//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the handles
//! of its inputs. Node ids are assigned in creation order, which is already a
//! topological order, so `backward` walks ids downward and visits each node
//! once. A tape is built per step and dropped after `backward`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    Slice { src: usize, start: usize },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    RmsNorm { x: usize, gain: usize, eps: f64 },
    Silu(usize),
    LogSigmoid(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Rope { src: usize, rot: Rc<RopeTable>, heads: usize },
    MaskFill { src: usize, mask: Rc<Vec<bool>> },
    PickPerRow { src: usize, idx: Vec<usize> },
    KlRows { src: usize, p: Rc<Tensor> },
}

/// Precomputed `(cos, sin)` per row and pair for one rotary application.
#[derive(Debug)]
pub(crate) struct RopeTable {
    pub width: usize,
    /// `rows × width/2` cosines and sines.
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTable {
    pub(crate) fn new(positions: &[usize], width: usize, base: f64) -> Self {
        let half = width / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / width as f64);
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { width, cos, sin }
    }

    /// Rotates `data` (`rows × heads·width`) in place; `inverse` applies the transpose.
    pub(crate) fn apply(&self, data: &mut [f64], heads: usize, inverse: bool) {
        let half = self.width / 2;
        let row_len = heads * self.width;
        if row_len == 0 {
            return;
        }
        for (r, row) in data.chunks_mut(row_len).enumerate() {
            let c = &self.cos[r * half..(r + 1) * half];
            let s = &self.sin[r * half..(r + 1) * half];
            for head in row.chunks_mut(self.width) {
                for i in 0..half {
                    let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                    let sn = if inverse { -s[i] } else { s[i] };
                    head[2 * i] = x0 * c[i] - x1 * sn;
                    head[2 * i + 1] = x0 * sn + x1 * c[i];
                }
            }
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of primitive applications for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<BTreeMap<usize, Vec<f64>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let needs = t.requires_grad();
        let mut v = t.clone();
        v.zero_grad();
        self.push(v, Op::Leaf, needs)
    }

    /// Records `t` as a trainable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        let mut v = t.clone();
        v.zero_grad();
        v.set_requires_grad(true);
        self.push(v, Op::Leaf, true)
    }

    /// Records `t` as a constant (never receives gradient).
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn concat_last<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_last(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(out, Op::Concat(ids), needs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::dim("concat_rows", first.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), needs))
    }

    /// Gathers rows of a `vocab × d` table.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let t = table.value();
        let [vocab, d] = t.shape() else {
            return Err(Error::dim("embedding", t.shape(), &[]));
        };
        let (vocab, d) = (*vocab, *d);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let needs = self.needs(&[table.id]);
        Ok(self.push(
            out,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    /// Adds the leaf gradient of `v` (if any) into `target.grad`.
    pub fn accumulate_into(&self, v: Var<'_>, target: &mut Tensor) -> Result<()> {
        match self.leaf_grads.borrow().get(&v.id) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn clear_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Propagates d(loss)/d(·) to every gradient-requiring leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| -> &Tensor { nodes[i].value.as_ref() };
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if nodes[*a].needs_grad {
                        send(*a, kernels::matmul_a_bt(&g, bv.data(), m, n, k));
                    }
                    if nodes[*b].needs_grad {
                        send(*b, kernels::matmul_at_b(av.data(), &g, m, k, n));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].needs_grad {
                        send(*a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
                    }
                    if nodes[*b].needs_grad {
                        send(*b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
                    }
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
                Op::Transpose(a) => {
                    let s = node.value.shape();
                    send(*a, kernels::transpose(&g, s[0], s[1]));
                }
                Op::Reshape(a) => send(*a, g),
                Op::Concat(parts) => {
                    let width = node.value.cols();
                    let rows = g.len() / width.max(1);
                    let mut offset = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if nodes[p].needs_grad {
                            let mut part = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                part.extend_from_slice(&g[r * width + offset..r * width + offset + c]);
                            }
                            send(p, part);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        if nodes[p].needs_grad {
                            send(p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::Slice { src, start } => {
                    let full = val(*src);
                    let c = full.cols();
                    let w = node.value.cols();
                    let mut out = vec![0.0; full.numel()];
                    for (r, chunk) in g.chunks(w.max(1)).enumerate() {
                        out[r * c + start..r * c + start + w].copy_from_slice(chunk);
                    }
                    send(*src, out);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut out = vec![0.0; g.len()];
                    for ((o, gy), yy) in out.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            o[j] = yy[j] * (gy[j] - dot);
                        }
                    }
                    send(*a, out);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut out = vec![0.0; g.len()];
                    for ((o, gy), yy) in out.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            o[j] = gy[j] - yy[j].exp() * total;
                        }
                    }
                    send(*a, out);
                }
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (xv, gv) = (val(*x), val(*gain));
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.numel()];
                    let mut ggain = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    for (r, xr) in xv.data().chunks(c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let mu = xr.iter().sum::<f64>() / c as f64;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * rstd).collect();
                        let gxhat: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let mean_g = gxhat.iter().sum::<f64>() / c as f64;
                        let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = rstd * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                            ggain[j] += gr[j] * xhat[j];
                            gbias[j] += gr[j];
                        }
                    }
                    send(*x, gx);
                    send(*gain, ggain);
                    send(*bias, gbias);
                }
                Op::RmsNorm { x, gain, eps } => {
                    let (xv, gv) = (val(*x), val(*gain));
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.numel()];
                    let mut ggain = vec![0.0; c];
                    for (r, xr) in xv.data().chunks(c).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let rinv = 1.0 / (ms + eps).sqrt();
                        let a: Vec<f64> = gr.iter().zip(gv.data()).map(|(p, q)| p * q).collect();
                        let ax = a.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = rinv * a[j] - xr[j] * rinv * rinv * rinv * ax;
                            ggain[j] += gr[j] * xr[j] * rinv;
                        }
                    }
                    send(*x, gx);
                    send(*gain, ggain);
                }
                Op::Silu(a) => {
                    let out = val(*a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(x, gy)| {
                            let s = sigmoid(*x);
                            gy * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    send(*a, out);
                }
                Op::LogSigmoid(a) => {
                    let out = val(*a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(x, gy)| gy * sigmoid(-x))
                        .collect();
                    send(*a, out);
                }
                Op::Embedding { table, ids } => {
                    let t = val(*table);
                    let d = t.cols();
                    let mut out = vec![0.0; t.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            out[id * d + j] += g[r * d + j];
                        }
                    }
                    send(*table, out);
                }
                Op::Rope { src, rot, heads } => {
                    let mut out = g;
                    rot.apply(&mut out, *heads, true);
                    send(*src, out);
                }
                Op::MaskFill { src, mask } => {
                    let out = g
                        .iter()
                        .zip(mask.iter())
                        .map(|(x, &m)| if m { 0.0 } else { *x })
                        .collect();
                    send(*src, out);
                }
                Op::PickPerRow { src, idx } => {
                    let s = val(*src);
                    let c = s.cols();
                    let mut out = vec![0.0; s.numel()];
                    for (r, &j) in idx.iter().enumerate() {
                        out[r * c + j] = g[r];
                    }
                    send(*src, out);
                }
                Op::KlRows { src, p } => {
                    let q = val(*src).softmax_rows();
                    let k = g[0] / p.rows() as f64;
                    let out = q.data().iter().zip(p.data()).map(|(a, b)| k * (a - b)).collect();
                    send(*src, out);
                }
            }
        }
        Ok(())
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

/// `log σ(x)` without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn unary(&self, out: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(out, op, needs)
    }

    fn binary(&self, other: Var<'t>, out: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(out, op, needs)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&other.value())?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&other.value())?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().mul(&other.value())?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().scale(c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice_last(start, end)?;
        Ok(self.unary(out, Op::Slice { src: self.id, start }))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        let out = self.value().softmax_rows();
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let out = self.value().log_softmax_rows();
        self.unary(out, Op::LogSoftmaxRows(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        self.unary(out, Op::Mean(self.id))
    }

    /// Row-wise layer normalization with learnable gain and bias over the last axis.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        let (gv, bv) = (gain.value(), bias.value());
        if gv.numel() != c || bv.numel() != c {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let mut out = Vec::with_capacity(x.numel());
        for xr in x.data().chunks(c) {
            let mu = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out.push((xr[j] - mu) * rstd * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            needs,
        ))
    }

    /// Row-wise RMS normalization with a learnable gain.
    pub fn rms_norm(self, gain: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        let gv = gain.value();
        if gv.numel() != c {
            return Err(Error::dim("rms_norm", x.shape(), gv.shape()));
        }
        let mut out = Vec::with_capacity(x.numel());
        for xr in x.data().chunks(c) {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let rinv = 1.0 / (ms + eps).sqrt();
            out.extend(xr.iter().zip(gv.data()).map(|(v, g)| v * rinv * g));
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.binary(
            gain,
            out,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                eps,
            },
        ))
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i] * sigmoid(v.data()[i]));
        self.unary(out, Op::Silu(self.id))
    }

    pub fn log_sigmoid(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::from_fn(v.shape(), |i| log_sigmoid(v.data()[i]));
        self.unary(out, Op::LogSigmoid(self.id))
    }

    /// Rotary embedding over `rows × heads·width`, one position per row.
    pub fn rope(self, positions: &[usize], heads: usize, base: f64) -> Result<Var<'t>> {
        let v = self.value();
        let (rows, cols) = (v.rows(), v.cols());
        if v.shape().len() != 2 || heads == 0 || cols % heads != 0 {
            return Err(Error::dim("rope", v.shape(), &[heads]));
        }
        let width = cols / heads;
        if !width.is_multiple_of(2) {
            return Err(Error::Geometry(format!("rotary width {width} must be even")));
        }
        if positions.len() != rows {
            return Err(Error::dim("rope", v.shape(), &[positions.len()]));
        }
        let rot = Rc::new(RopeTable::new(positions, width, base));
        let mut data = v.data().to_vec();
        rot.apply(&mut data, heads, false);
        let out = Tensor::new(v.shape(), data)?;
        Ok(self.unary(
            out,
            Op::Rope {
                src: self.id,
                rot,
                heads,
            },
        ))
    }

    /// Replaces entries where `mask` is true with `value`; no gradient flows there.
    pub fn mask_fill(self, mask: Rc<Vec<bool>>, value: f64) -> Result<Var<'t>> {
        let v = self.value();
        if mask.len() != v.numel() {
            return Err(Error::dim("mask_fill", v.shape(), &[mask.len()]));
        }
        let out = Tensor::from_fn(v.shape(), |i| if mask[i] { value } else { v.data()[i] });
        Ok(self.unary(out, Op::MaskFill { src: self.id, mask }))
    }

    /// `out[r] = self[r, idx[r]]` for a matrix; returns a vector.
    pub fn pick_per_row(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let c = v.cols();
        if v.shape().len() != 2 || idx.len() != v.rows() {
            return Err(Error::dim("pick_per_row", v.shape(), &[idx.len()]));
        }
        let mut out = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::Vocab { id: j, vocab: c });
            }
            out.push(v.data()[r * c + j]);
        }
        let out = Tensor::new(&[idx.len()], out)?;
        Ok(self.unary(
            out,
            Op::PickPerRow {
                src: self.id,
                idx: idx.to_vec(),
            },
        ))
    }
}

impl<'t> Var<'t> {
    /// Row-averaged `KL(softmax(target) ‖ softmax(self))` for logit matrices.
    ///
    /// The gradient is `(softmax(self) − softmax(target)) / rows`, which is
    /// exactly zero when the logits coincide.
    pub fn kl_rows_from(self, target: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape() != target.shape() || v.shape().len() != 2 {
            return Err(Error::dim("kl_rows_from", v.shape(), target.shape()));
        }
        let log_p = target.log_softmax_rows();
        let log_q = v.log_softmax_rows();
        let p = target.softmax_rows();
        let total: f64 = p
            .data()
            .iter()
            .zip(log_p.data().iter().zip(log_q.data()))
            .map(|(pi, (lp, lq))| if *pi > 0.0 { pi * (lp - lq) } else { 0.0 })
            .sum();
        let out = Tensor::scalar(total / v.rows() as f64);
        Ok(self.unary(out, Op::KlRows { src: self.id, p: Rc::new(p) }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::from_fn(&[2, 3], |i| i as f64));
        tape.backward(x.sum()).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn half_square_gives_identity() {
        let tape = Tape::new();
        let t = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = tape.param(&t);
        let loss = x.mul(x).unwrap().sum().scale(0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), t.data());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[3]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![2.0; 3]);
        tape.clear_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let x = tape.param(&Tensor::full(&[2], 1.0));
        tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }
}
