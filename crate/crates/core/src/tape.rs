//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every differentiable computation happens through a [`Tape`]. Inputs enter
//! either as leaves ([`Tape::leaf`], gradient requested) or as constants
//! ([`Tape::constant`], detached). An op is recorded only when at least one
//! of its inputs carries a node, so purely constant work costs nothing on
//! the tape. Node ids are indices into an append-only list, which makes the
//! reverse walk in [`Tape::backward`] a reverse topological order.
//!
//! One tape serves one differentiable pass. Tapes are single-threaded;
//! parallel workers each build their own.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub type NodeId = usize;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Smallest denominator magnitude accepted by [`Tape::div`].
pub const MIN_DENOMINATOR: f64 = 1e-12;

/// A value flowing through a tape, with its node handle when it requires
/// gradients.
#[derive(Clone, Debug)]
pub struct Var {
    value: Tensor,
    node: Option<(u64, NodeId)>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|(_, id)| id)
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

/// Cost of the gradient retained by a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Recorded ops (leaves excluded).
    pub nodes: usize,
    /// Total element count of the tensors saved for the backward pass.
    pub saved_elements: usize,
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node_id().and_then(|id| self.map.get(&id))
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine { scale: f64 },
    MatMul { m: usize, k: usize, n: usize },
    Conv3x3 { c_in: usize, c_out: usize, h: usize, w: usize },
    Conv1x1 { c_in: usize, c_out: usize, hw: usize },
    AddChannel { c: usize, hw: usize },
    PadReplicate { c: usize, h: usize, w: usize },
    Crop { c: usize, h: usize, w: usize },
    AvgPool2 { c: usize, h: usize, w: usize },
    Upsample2 { c: usize, h: usize, w: usize },
    Relu,
    Sigmoid,
    Log,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    Softmax { c: usize, hw: usize },
    CrossEntropy { k: usize, hw: usize, target: Arc<[u8]> },
    Mse,
    Mean,
    Sum,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Option<NodeId>>,
    saved: Vec<Tensor>,
    shape: Vec<usize>,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
    op_nodes: usize,
    saved_elements: usize,
    consumed: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner::default()),
        }
    }

    /// A trainable input: its gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            saved: Vec::new(),
            shape: value.shape().to_vec(),
        });
        inner.leaves.push(id);
        Var {
            value,
            node: Some((self.id, id)),
        }
    }

    /// A detached input: never recorded, never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        Var { value, node: None }
    }

    pub fn stats(&self) -> TapeStats {
        let inner = self.inner.borrow();
        TapeStats {
            nodes: inner.op_nodes,
            saved_elements: inner.saved_elements,
        }
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn slot(&self, v: &Var) -> Result<Option<NodeId>> {
        match v.node {
            None => Ok(None),
            Some((tape, id)) if tape == self.id => Ok(Some(id)),
            Some(_) => Err(Error::ForeignVar),
        }
    }

    fn record(&self, op: Op, inputs: &[&Var], saved: Vec<Tensor>, value: Tensor) -> Result<Var> {
        let slots = inputs
            .iter()
            .map(|v| self.slot(v))
            .collect::<Result<Vec<_>>>()?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        if slots.iter().all(Option::is_none) {
            return Ok(Var { value, node: None });
        }
        let id = inner.nodes.len();
        inner.op_nodes += 1;
        inner.saved_elements += saved.iter().map(Tensor::len).sum::<usize>();
        inner.nodes.push(Node {
            op,
            inputs: slots,
            saved,
            shape: value.shape().to_vec(),
        });
        Ok(Var {
            value,
            node: Some((self.id, id)),
        })
    }

    // ---- elementwise binary ops, with scalar broadcasting ----

    fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
        if a.shape() == b.shape() {
            Ok(a.shape().to_vec())
        } else if b.is_scalar() {
            Ok(a.shape().to_vec())
        } else if a.is_scalar() {
            Ok(b.shape().to_vec())
        } else {
            Err(Error::shape(op, a.shape(), b.shape()))
        }
    }

    fn binary_values(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let shape = Self::broadcast_shape(op, a, b)?;
        let n: usize = shape.iter().product();
        let (da, db) = (a.data(), b.data());
        let data = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                f(x, y)
            })
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = Self::binary_values("add", &a.value, &b.value, |x, y| x + y)?;
        self.record(Op::Add, &[a, b], vec![], out)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = Self::binary_values("sub", &a.value, &b.value, |x, y| x - y)?;
        self.record(Op::Sub, &[a, b], vec![], out)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = Self::binary_values("mul", &a.value, &b.value, |x, y| x * y)?;
        let saved = vec![a.value.clone(), b.value.clone()];
        self.record(Op::Mul, &[a, b], saved, out)
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        if let Some(&d) = b.value.data().iter().find(|d| d.abs() < MIN_DENOMINATOR) {
            return Err(Error::DivisionByZero(d));
        }
        let out = Self::binary_values("div", &a.value, &b.value, |x, y| x / y)?;
        // the denominator is always needed; the numerator only for d/db
        let saved = vec![a.value.clone(), b.value.clone()];
        self.record(Op::Div, &[a, b], saved, out)
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&self, x: &Var, scale: f64, shift: f64) -> Result<Var> {
        let out = x.value.map(|v| scale * v + shift);
        self.record(Op::Affine { scale }, &[x], vec![], out)
    }

    pub fn scale(&self, x: &Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    // ---- linear algebra ----

    /// `a: m×k` times `b: k×n`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.value.data(), false, b.value.data(), false, 0.0, &mut out);
        let saved = vec![a.value.clone(), b.value.clone()];
        self.record(
            Op::MatMul { m, k, n },
            &[a, b],
            saved,
            Tensor::from_parts(vec![m, n], out),
        )
    }

    /// 3×3 stride-1 convolution with zero padding 1.
    ///
    /// `x: C_in×H×W`, `kernel: C_out×C_in×3×3`, optional `bias: C_out`.
    pub fn conv2d3x3(&self, x: &Var, kernel: &Var, bias: Option<&Var>) -> Result<Var> {
        let (sx, sk) = (x.shape(), kernel.shape());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::shape("conv2d3x3", sx, sk));
        }
        let (c_in, h, w, c_out) = (sx[0], sx[1], sx[2], sk[0]);
        let hw = h * w;
        let mut out = vec![0.0; c_out * hw];
        if let Some(b) = bias {
            if b.value.len() != c_out {
                return Err(Error::shape("conv2d3x3 bias", b.shape(), &[c_out]));
            }
            for (o, &bv) in b.value.data().iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        let col = kernels::im2col3x3(x.value.data(), c_in, h, w);
        kernels::gemm(c_out, c_in * 9, hw, kernel.value.data(), false, &col, false, 1.0, &mut out);
        let value = Tensor::from_parts(vec![c_out, h, w], out);
        let op = Op::Conv3x3 { c_in, c_out, h, w };
        let saved = vec![x.value.clone(), kernel.value.clone()];
        match bias {
            Some(b) => self.record(op, &[x, kernel, b], saved, value),
            None => self.record(op, &[x, kernel], saved, value),
        }
    }

    /// Pointwise channel mixing: `x: C_in×H×W`, `weight: C_out×C_in`,
    /// optional `bias: C_out`.
    pub fn conv1x1(&self, x: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (sx, sw) = (x.shape(), weight.shape());
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(Error::shape("conv1x1", sx, sw));
        }
        let (c_in, c_out, hw) = (sx[0], sw[0], sx[1] * sx[2]);
        let mut out = vec![0.0; c_out * hw];
        if let Some(b) = bias {
            if b.value.len() != c_out {
                return Err(Error::shape("conv1x1 bias", b.shape(), &[c_out]));
            }
            for (o, &bv) in b.value.data().iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        kernels::gemm(c_out, c_in, hw, weight.value.data(), false, x.value.data(), false, 1.0, &mut out);
        let value = Tensor::from_parts(vec![c_out, sx[1], sx[2]], out);
        let op = Op::Conv1x1 { c_in, c_out, hw };
        let saved = vec![x.value.clone(), weight.value.clone()];
        match bias {
            Some(b) => self.record(op, &[x, weight, b], saved, value),
            None => self.record(op, &[x, weight], saved, value),
        }
    }

    /// Adds `bias[c]` to every element of channel `c` of `x: C×H×W`.
    /// `bias` may be shaped `[C]` or `[C, 1]`.
    pub fn add_channel(&self, x: &Var, bias: &Var) -> Result<Var> {
        let sx = x.shape();
        if sx.len() != 3 || bias.value.len() != sx[0] {
            return Err(Error::shape("add_channel", sx, bias.shape()));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let b = bias.value.data();
        let data = x
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / hw])
            .collect();
        let value = Tensor::from_parts(sx.to_vec(), data);
        self.record(Op::AddChannel { c, hw }, &[x, bias], vec![], value)
    }

    /// Grows `x: C×H×W` by one pixel on every side, copying the nearest
    /// edge value.
    pub fn pad_replicate(&self, x: &Var) -> Result<Var> {
        let sx = x.shape();
        if sx.len() != 3 {
            return Err(Error::shape("pad_replicate", sx, &[0, 0, 0]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let src = x.value.data();
        let (ph, pw) = (h + 2, w + 2);
        let mut data = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for y in 0..ph {
                let sy = y.saturating_sub(1).min(h - 1);
                for xx in 0..pw {
                    let sx = xx.saturating_sub(1).min(w - 1);
                    data[(ch * ph + y) * pw + xx] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        let value = Tensor::from_parts(vec![c, ph, pw], data);
        self.record(Op::PadReplicate { c, h, w }, &[x], vec![], value)
    }

    /// Drops the outer one-pixel ring of `x: C×H×W`.
    pub fn crop(&self, x: &Var) -> Result<Var> {
        let sx = x.shape();
        if sx.len() != 3 || sx[1] < 3 || sx[2] < 3 {
            return Err(Error::shape("crop", sx, &[0, 3, 3]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let src = x.value.data();
        let mut data = Vec::with_capacity(c * (h - 2) * (w - 2));
        for ch in 0..c {
            for y in 1..h - 1 {
                data.extend_from_slice(&src[(ch * h + y) * w + 1..(ch * h + y) * w + w - 1]);
            }
        }
        let value = Tensor::from_parts(vec![c, h - 2, w - 2], data);
        self.record(Op::Crop { c, h, w }, &[x], vec![], value)
    }

    /// 2×2 average pooling of `x: C×H×W` with even `H` and `W`.
    pub fn avg_pool2(&self, x: &Var) -> Result<Var> {
        let sx = x.shape();
        if sx.len() != 3 || sx[1] % 2 != 0 || sx[2] % 2 != 0 {
            return Err(Error::shape("avg_pool2", sx, &[0, 2, 2]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = x.value.data();
        let data = (0..c * oh * ow)
            .map(|i| {
                let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                let at = |dy: usize, dx: usize| src[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1))
            })
            .collect();
        let value = Tensor::from_parts(vec![c, oh, ow], data);
        self.record(Op::AvgPool2 { c, h, w }, &[x], vec![], value)
    }

    /// Nearest-neighbour 2× upsampling of `x: C×H×W`.
    pub fn upsample2(&self, x: &Var) -> Result<Var> {
        let sx = x.shape();
        if sx.len() != 3 {
            return Err(Error::shape("upsample2", sx, &[0, 0, 0]));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = x.value.data();
        let data = (0..c * oh * ow)
            .map(|i| {
                let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                src[(ch * h + y / 2) * w + xx / 2]
            })
            .collect();
        let value = Tensor::from_parts(vec![c, oh, ow], data);
        self.record(Op::Upsample2 { c, h, w }, &[x], vec![], value)
    }

    // ---- pointwise nonlinearities ----

    pub fn relu(&self, x: &Var) -> Result<Var> {
        let out = x.value.map(|v| v.max(0.0));
        self.record(Op::Relu, &[x], vec![out.clone()], out)
    }

    pub fn sigmoid(&self, x: &Var) -> Result<Var> {
        let out = x.value.map(sigmoid);
        self.record(Op::Sigmoid, &[x], vec![out.clone()], out)
    }

    pub fn log(&self, x: &Var) -> Result<Var> {
        if let Some(&v) = x.value.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain { op: "log", value: v });
        }
        let out = x.value.map(f64::ln);
        self.record(Op::Log, &[x], vec![x.value.clone()], out)
    }

    pub fn sqrt(&self, x: &Var) -> Result<Var> {
        if let Some(&v) = x.value.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain { op: "sqrt", value: v });
        }
        let out = x.value.map(f64::sqrt);
        self.record(Op::Sqrt, &[x], vec![out.clone()], out)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside the
    /// open interval.
    pub fn clamp(&self, x: &Var, lo: f64, hi: f64) -> Result<Var> {
        let out = x.value.map(|v| v.clamp(lo, hi));
        self.record(Op::Clamp { lo, hi }, &[x], vec![x.value.clone()], out)
    }

    /// Softmax over the leading (channel) axis, independently per position.
    pub fn softmax(&self, x: &Var) -> Result<Var> {
        let (c, hw) = channel_layout(x.shape());
        if c == 0 {
            return Err(Error::Empty("softmax"));
        }
        let out = softmax_channels(x.value.data(), c, hw);
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.record(Op::Softmax { c, hw }, &[x], vec![value.clone()], value)
    }

    /// Mean over positions of `-log softmax(logits)[target]`, where
    /// `logits: K×H×W` and `target` holds one class index per position.
    pub fn cross_entropy(&self, logits: &Var, target: &[u8]) -> Result<Var> {
        let (k, hw) = channel_layout(logits.shape());
        if target.len() != hw {
            return Err(Error::shape("cross_entropy", logits.shape(), &[target.len()]));
        }
        if hw == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
            return Err(Error::ClassOutOfRange {
                index: bad as usize,
                classes: k,
            });
        }
        let probs = softmax_channels(logits.value.data(), k, hw);
        let loss = target
            .iter()
            .enumerate()
            .map(|(p, &t)| -probs[t as usize * hw + p].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / hw as f64;
        let op = Op::CrossEntropy {
            k,
            hw,
            target: target.into(),
        };
        let saved = vec![Tensor::from_parts(logits.shape().to_vec(), probs)];
        self.record(op, &[logits], saved, Tensor::scalar(loss))
    }

    // ---- reductions ----

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&self, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            return Err(Error::shape("mse", a.shape(), b.shape()));
        }
        if a.value.is_empty() {
            return Err(Error::Empty("mse"));
        }
        let diff = a.value.zip_map(&b.value, |x, y| x - y)?;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        self.record(Op::Mse, &[a, b], vec![diff], Tensor::scalar(loss))
    }

    pub fn mean(&self, x: &Var) -> Result<Var> {
        if x.value.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = x.value.data().iter().sum::<f64>() / x.value.len() as f64;
        self.record(Op::Mean, &[x], vec![], Tensor::scalar(m))
    }

    pub fn sum(&self, x: &Var) -> Result<Var> {
        let s = x.value.data().iter().sum::<f64>();
        self.record(Op::Sum, &[x], vec![], Tensor::scalar(s))
    }

    // ---- reverse pass ----

    /// Propagates gradients of a scalar `loss` back to every leaf and
    /// consumes the tape.
    ///
    /// Every leaf gets an entry, zero when the loss does not depend on it.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !loss.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = self.slot(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.consumed = true;

        let lens: Vec<usize> = inner.nodes.iter().map(|n| n.shape.iter().product()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        if let Some(root) = root {
            grads[root] = Some(vec![1.0]);
        }
        for id in (0..inner.nodes.len()).rev() {
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(node, &g, &lens, &mut grads);
        }

        let map = inner
            .leaves
            .iter()
            .map(|&leaf| {
                let shape = inner.nodes[leaf].shape.clone();
                let g = grads[leaf].take().unwrap_or_else(|| vec![0.0; lens[leaf]]);
                (leaf, Tensor::from_parts(shape, g))
            })
            .collect();
        Ok(Gradients { map })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&c, rest)) => (c, rest.iter().product()),
        None => (1, 1),
    }
}

fn softmax_channels(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let max = (0..c).map(|k| x[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..c {
            let e = (x[k * hw + p] - max).exp();
            out[k * hw + p] = e;
            total += e;
        }
        for k in 0..c {
            out[k * hw + p] /= total;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], slot: Option<NodeId>, len: usize, f: impl FnOnce(&mut [f64])) {
    let Some(id) = slot else { return };
    let buf = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

// Adds `g` into a gradient buffer that may be a broadcast scalar.
fn add_broadcast(buf: &mut [f64], g: impl Iterator<Item = f64>) {
    if buf.len() == 1 {
        buf[0] += g.sum::<f64>();
    } else {
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }
}

fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backprop(node: &Node, g: &[f64], lens: &[usize], grads: &mut [Option<Vec<f64>>]) {
    let ins = &node.inputs;
    match &node.op {
        Op::Leaf => {}
        Op::Add | Op::Sub => {
            let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
            for (slot, s) in [(ins[0], 1.0), (ins[1], sign)] {
                let Some(id) = slot else { continue };
                accumulate(grads, slot, lens[id], |buf| {
                    add_broadcast(buf, g.iter().map(|v| s * v))
                });
            }
        }
        Op::Mul => {
            let (a, b) = (node.saved[0].data(), node.saved[1].data());
            accumulate(grads, ins[0], a.len(), |buf| {
                add_broadcast(buf, g.iter().enumerate().map(|(i, v)| v * at(b, i)))
            });
            accumulate(grads, ins[1], b.len(), |buf| {
                add_broadcast(buf, g.iter().enumerate().map(|(i, v)| v * at(a, i)))
            });
        }
        Op::Div => {
            let (a, b) = (node.saved[0].data(), node.saved[1].data());
            accumulate(grads, ins[0], a.len(), |buf| {
                add_broadcast(buf, g.iter().enumerate().map(|(i, v)| v / at(b, i)))
            });
            accumulate(grads, ins[1], b.len(), |buf| {
                add_broadcast(
                    buf,
                    g.iter().enumerate().map(|(i, v)| {
                        let d = at(b, i);
                        -v * at(a, i) / (d * d)
                    }),
                )
            });
        }
        Op::Affine { scale } => {
            accumulate(grads, ins[0], g.len(), |buf| {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += scale * v;
                }
            });
        }
        Op::MatMul { m, k, n } => {
            let (a, b) = (node.saved[0].data(), node.saved[1].data());
            // dA = G·Bᵀ, dB = Aᵀ·G
            accumulate(grads, ins[0], m * k, |buf| {
                kernels::gemm(*m, *n, *k, g, false, b, true, 1.0, buf)
            });
            accumulate(grads, ins[1], k * n, |buf| {
                kernels::gemm(*k, *m, *n, a, true, g, false, 1.0, buf)
            });
        }
        Op::Conv3x3 { c_in, c_out, h, w } => {
            let (x, kernel) = (node.saved[0].data(), node.saved[1].data());
            let hw = h * w;
            let col = kernels::im2col3x3(x, *c_in, *h, *w);
            accumulate(grads, ins[0], c_in * hw, |buf| {
                let mut gcol = vec![0.0; c_in * 9 * hw];
                kernels::gemm(c_in * 9, *c_out, hw, kernel, true, g, false, 0.0, &mut gcol);
                kernels::col2im3x3(&gcol, *c_in, *h, *w, buf);
            });
            accumulate(grads, ins[1], c_out * c_in * 9, |buf| {
                kernels::gemm(*c_out, hw, c_in * 9, g, false, &col, true, 1.0, buf)
            });
            if let Some(&bias) = ins.get(2) {
                accumulate(grads, bias, *c_out, |buf| channel_sums(buf, g, hw));
            }
        }
        Op::Conv1x1 { c_in, c_out, hw } => {
            let (x, weight) = (node.saved[0].data(), node.saved[1].data());
            accumulate(grads, ins[0], c_in * hw, |buf| {
                kernels::gemm(*c_in, *c_out, *hw, weight, true, g, false, 1.0, buf)
            });
            accumulate(grads, ins[1], c_out * c_in, |buf| {
                kernels::gemm(*c_out, *hw, *c_in, g, false, x, true, 1.0, buf)
            });
            if let Some(&bias) = ins.get(2) {
                accumulate(grads, bias, *c_out, |buf| channel_sums(buf, g, *hw));
            }
        }
        Op::AddChannel { c, hw } => {
            accumulate(grads, ins[0], g.len(), |buf| {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            });
            accumulate(grads, ins[1], *c, |buf| channel_sums(buf, g, *hw));
        }
        Op::PadReplicate { c, h, w } => {
            let (ph, pw) = (h + 2, w + 2);
            accumulate(grads, ins[0], c * h * w, |buf| {
                for ch in 0..*c {
                    for y in 0..ph {
                        let sy = y.saturating_sub(1).min(h - 1);
                        for x in 0..pw {
                            let sx = x.saturating_sub(1).min(w - 1);
                            buf[(ch * h + sy) * w + sx] += g[(ch * ph + y) * pw + x];
                        }
                    }
                }
            });
        }
        Op::Crop { c, h, w } => {
            let (ih, iw) = (h - 2, w - 2);
            accumulate(grads, ins[0], c * h * w, |buf| {
                for ch in 0..*c {
                    for y in 0..ih {
                        for x in 0..iw {
                            buf[(ch * h + y + 1) * w + x + 1] += g[(ch * ih + y) * iw + x];
                        }
                    }
                }
            });
        }
        Op::AvgPool2 { c, h, w } => {
            let (oh, ow) = (h / 2, w / 2);
            accumulate(grads, ins[0], c * h * w, |buf| {
                for (i, gv) in g.iter().enumerate() {
                    let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        buf[(ch * h + 2 * y + dy) * w + 2 * x + dx] += 0.25 * gv;
                    }
                }
            });
        }
        Op::Upsample2 { c, h, w } => {
            let (oh, ow) = (2 * h, 2 * w);
            accumulate(grads, ins[0], c * h * w, |buf| {
                for (i, gv) in g.iter().enumerate() {
                    let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
                    buf[(ch * h + y / 2) * w + x / 2] += gv;
                }
            });
        }
        Op::Relu => {
            let y = node.saved[0].data();
            accumulate(grads, ins[0], g.len(), |buf| {
                for ((b, v), &yv) in buf.iter_mut().zip(g).zip(y) {
                    if yv > 0.0 {
                        *b += v;
                    }
                }
            });
        }
        Op::Sigmoid => {
            let y = node.saved[0].data();
            accumulate(grads, ins[0], g.len(), |buf| {
                for ((b, v), &yv) in buf.iter_mut().zip(g).zip(y) {
                    *b += v * yv * (1.0 - yv);
                }
            });
        }
        Op::Log => {
            let x = node.saved[0].data();
            accumulate(grads, ins[0], g.len(), |buf| {
                for ((b, v), &xv) in buf.iter_mut().zip(g).zip(x) {
                    *b += v / xv;
                }
            });
        }
        Op::Sqrt => {
            let y = node.saved[0].data();
            accumulate(grads, ins[0], g.len(), |buf| {
                for ((b, v), &yv) in buf.iter_mut().zip(g).zip(y) {
                    *b += 0.5 * v / yv;
                }
            });
        }
        Op::Clamp { lo, hi } => {
            let x = node.saved[0].data();
            accumulate(grads, ins[0], g.len(), |buf| {
                for ((b, v), &xv) in buf.iter_mut().zip(g).zip(x) {
                    if xv > *lo && xv < *hi {
                        *b += v;
                    }
                }
            });
        }
        Op::Softmax { c, hw } => {
            let y = node.saved[0].data();
            accumulate(grads, ins[0], c * hw, |buf| {
                for p in 0..*hw {
                    let dot: f64 = (0..*c).map(|k| g[k * hw + p] * y[k * hw + p]).sum();
                    for k in 0..*c {
                        let i = k * hw + p;
                        buf[i] += y[i] * (g[i] - dot);
                    }
                }
            });
        }
        Op::CrossEntropy { k, hw, target } => {
            let probs = node.saved[0].data();
            let scale = g[0] / *hw as f64;
            accumulate(grads, ins[0], k * hw, |buf| {
                for (i, (b, &p)) in buf.iter_mut().zip(probs).enumerate() {
                    let onehot = if target[i % hw] as usize == i / hw { 1.0 } else { 0.0 };
                    *b += scale * (p - onehot);
                }
            });
        }
        Op::Mse => {
            let diff = node.saved[0].data();
            let scale = 2.0 * g[0] / diff.len() as f64;
            accumulate(grads, ins[0], diff.len(), |buf| {
                for (b, d) in buf.iter_mut().zip(diff) {
                    *b += scale * d;
                }
            });
            accumulate(grads, ins[1], diff.len(), |buf| {
                for (b, d) in buf.iter_mut().zip(diff) {
                    *b -= scale * d;
                }
            });
        }
        Op::Mean | Op::Sum => {
            let Some(id) = ins[0] else { return };
            let len = lens[id];
            let v = if matches!(node.op, Op::Mean) { g[0] / len as f64 } else { g[0] };
            accumulate(grads, Some(id), len, |buf| buf.iter_mut().for_each(|b| *b += v));
        }
    }
}

fn channel_sums(buf: &mut [f64], g: &[f64], hw: usize) {
    for (b, chunk) in buf.iter_mut().zip(g.chunks(hw)) {
        *b += chunk.iter().sum::<f64>();
    }
}
