//! Tape-based reverse-mode differentiation over a closed operator set.
//!
//! Every operator appends a node holding its output value and enough
//! information to replay its backward rule. [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a reverse topological order
//! because a node can only reference nodes created before it.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
    Sign,
    Abs,
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `[C]` against `[N, C, ...]`.
    Channel { channels: usize, inner: usize },
    /// `[N, C]` against `[N, C, H, W]`.
    SampleChannel { inner: usize },
    /// `[N, 1, H, W]` against `[N, C, H, W]`.
    Pixel { channels: usize, plane: usize },
}

impl Broadcast {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        match (a, b) {
            ([_, c, rest @ ..], [cb]) if c == cb => Ok(Broadcast::Channel {
                channels: *c,
                inner: rest.iter().product(),
            }),
            ([n, c, h, w], [nb, cb]) if n == nb && c == cb => {
                Ok(Broadcast::SampleChannel { inner: h * w })
            }
            ([n, c, h, w], [nb, 1, hb, wb]) if n == nb && h == hb && w == wb => {
                Ok(Broadcast::Pixel {
                    channels: *c,
                    plane: h * w,
                })
            }
            _ => Err(Error::shape(format!("cannot broadcast {b:?} against {a:?}"))),
        }
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Channel { channels, inner } => (i / inner) % channels,
            Broadcast::SampleChannel { inner } => i / inner,
            Broadcast::Pixel { channels, plane } => (i / (channels * plane)) * plane + i % plane,
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MaxScalar {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        p: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BilinearUp2 {
        x: Var,
    },
    Gap {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    SoftThreshold {
        u: Var,
        lambda: Var,
    },
    DiceBce {
        logits: Var,
        mask: Vec<f64>,
        bce_weight: f64,
        dice_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass and replays them backward.
///
/// A tape supports a single [`Tape::backward`] call; build a fresh tape (or
/// call [`Tape::reset`]) for the next pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sign(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Discards every recorded node. Outstanding [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.clear_grad();
        self.push_raw(t, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// requires one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push_raw(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a computed node; it requires grad iff any input does.
    pub(crate) fn push(&mut self, dims: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::from_values(dims, data)
            .expect("operator produced inconsistent dims")
            .with_requires_grad(rg);
        self.push_raw(value, op)
    }

    fn map_unary(&mut self, x: Var, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        let data = t.data().iter().map(|&v| f(v)).collect();
        self.push(&dims, data, Op::Unary { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, UnaryKind::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, UnaryKind::Sigmoid, sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map_unary(x, UnaryKind::Softplus, softplus)
    }

    /// Elementwise sign; its derivative is zero everywhere.
    pub fn sign(&mut self, x: Var) -> Var {
        self.map_unary(x, UnaryKind::Sign, sign)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, UnaryKind::Abs, f64::abs)
    }

    /// `max(x, floor)` elementwise.
    pub fn max_scalar(&mut self, x: Var, floor: f64) -> Var {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        let data = t.data().iter().map(|&v| v.max(floor)).collect();
        self.push(&dims, data, Op::MaxScalar { x, floor }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let dims = t.dims().to_vec();
        let data = t.data().iter().map(|&v| v * factor).collect();
        self.push(&dims, data, Op::Scale { x, factor }, &[x])
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let bcast = Broadcast::resolve(self.dims(a), self.dims(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        let data = match bcast {
            Broadcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => da
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, db[bcast.index(i)]))
                .collect(),
        };
        let dims = ta.dims().to_vec();
        Ok(self.push(&dims, data, Op::Binary { kind, a, b, bcast }, &[a, b]))
    }

    fn commutative(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() < self.value(b).len() {
            self.binary(kind, b, a)
        } else {
            self.binary(kind, a, b)
        }
    }

    /// Elementwise sum; the smaller operand may be broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.commutative(BinaryKind::Add, a, b)
    }

    /// Elementwise product; the smaller operand may be broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.commutative(BinaryKind::Mul, a, b)
    }

    /// `a - b`; only `b` may be broadcast.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(&[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(&[1], vec![m], Op::Mean(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, p) = match (self.dims(a), self.dims(b)) {
            (&[m, k], &[k2, p]) => (m, k, k2, p),
            (da, db) => {
                return Err(Error::shape(format!("matmul needs rank-2 operands, got {da:?} and {db:?}")))
            }
        };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner extents differ: {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * p];
        kernels::gemm(
            m,
            k,
            p,
            1.0,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (p, 1),
            0.0,
            &mut out,
            (p, 1),
        );
        Ok(self.push(&[m, p], out, Op::MatMul { a, b, m, k, p }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[rows, cols] = self.dims(x) else {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", self.dims(x))));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(&[cols, rows], out, Op::Transpose { x, rows, cols }, &[x]))
    }

    /// Every non-smooth element on the tape, in recording order, as its
    /// distance to the nearest kink and the branch it sits on: ReLU/sign/abs
    /// inputs against 0, clamps against their floor, soft-threshold inputs
    /// against ±λ, max-pool windows as the gap between the two largest
    /// entries with the winning position as branch.
    pub(crate) fn kinks(&self) -> Vec<(f64, u8)> {
        let side = |v: f64| (v.abs(), (v > 0.0) as u8);
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary {
                    kind: UnaryKind::Relu | UnaryKind::Sign | UnaryKind::Abs,
                    x,
                } => out.extend(self.value(*x).data().iter().map(|&v| side(v))),
                Op::MaxScalar { x, floor } => out.extend(self.value(*x).data().iter().map(|&v| side(v - floor))),
                Op::SoftThreshold { u, lambda } => {
                    let lam = self.value(*lambda).data();
                    let t = self.value(*u);
                    let c = lam.len();
                    let inner: usize = t.dims()[2..].iter().product();
                    out.extend(t.data().iter().enumerate().map(|(i, &v)| {
                        let (m, b) = side(v.abs() - lam[(i / inner) % c]);
                        (m, b + 2 * (v > 0.0) as u8)
                    }));
                }
                Op::MaxPool2 { x, argmax } => {
                    let t = self.value(*x);
                    let (n, c, h, w) = t.nchw().expect("pooling input is rank 4");
                    let d = t.data();
                    let mut o = 0;
                    for plane in 0..n * c {
                        let base = plane * h * w;
                        for oy in 0..h / 2 {
                            for ox in 0..w / 2 {
                                let mut win = [0.0; 4];
                                for (j, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                                    win[j] = d[base + (2 * oy + dy) * w + 2 * ox + dx];
                                }
                                let a = argmax[o] - base;
                                let branch = (2 * ((a / w) % 2) + a % 2) as u8;
                                win.sort_by(|a, b| b.total_cmp(a));
                                out.push((win[0] - win[1], branch));
                                o += 1;
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }


    /// Propagates d`loss`/d`v` to every node that requires a gradient.
    ///
    /// Afterwards every requires-grad node on the tape holds a gradient
    /// buffer, zero-filled when the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape; reset it first"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let len = node.value.len();
                node.value.set_grad(g.unwrap_or_else(|| vec![0.0; len]));
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => add_into(ga, g),
                        BinaryKind::Mul => {
                            for (k, gv) in g.iter().enumerate() {
                                ga[k] += gv * db[bcast.index(k)];
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (k, gv) in g.iter().enumerate() {
                        let j = bcast.index(k);
                        gb[j] += match kind {
                            BinaryKind::Add => *gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * da[k],
                        };
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xs = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for k in 0..g.len() {
                        gx[k] += g[k]
                            * match kind {
                                UnaryKind::Relu => (xs[k] > 0.0) as u8 as f64,
                                UnaryKind::Sigmoid => y[k] * (1.0 - y[k]),
                                UnaryKind::Softplus => sigmoid(xs[k]),
                                UnaryKind::Sign => 0.0,
                                UnaryKind::Abs => sign(xs[k]),
                            };
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor);
                }
            }
            Op::MaxScalar { x, floor } => {
                let xs = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for k in 0..g.len() {
                        if xs[k] > *floor {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MatMul { a, b, m, k, p } => {
                let (m, k, p) = (*m, *k, *p);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · Bᵀ
                    kernels::gemm(m, p, k, 1.0, g, (p, 1), db, (1, p), 1.0, ga, (k, 1));
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dC
                    kernels::gemm(k, m, p, 1.0, da, (1, k), g, (p, 1), 1.0, gb, (p, 1));
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, shape } => {
                let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.take_slot(grads, *x);
                let mut dw = self.take_slot(grads, *w);
                let mut db = bias.and_then(|b| self.take_slot(grads, b));
                kernels::conv2d_backward(
                    xs,
                    ws,
                    shape,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = bias {
                    restore(grads, *b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &src) in argmax.iter().enumerate() {
                        gx[src] += g[k];
                    }
                }
            }
            Op::BilinearUp2 { x } => {
                let (n, c, h, w) = self.value(*x).nchw().expect("rank checked at record time");
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::bilinear_up2_backward(g, n * c, h, w, gx);
                }
            }
            Op::Gap { x } => {
                let (_, _, h, w) = self.value(*x).nchw().expect("rank checked at record time");
                let plane = h * w;
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g[k / plane] / plane as f64;
                    }
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).nchw().expect("rank checked at record time");
                let cb = self.dims(*b)[1];
                let plane = h * w;
                let ct = ca + cb;
                if let Some(ga) = self.slot(grads, *a) {
                    for s in 0..n {
                        add_into(&mut ga[s * ca * plane..][..ca * plane], &g[s * ct * plane..][..ca * plane]);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for s in 0..n {
                        add_into(
                            &mut gb[s * cb * plane..][..cb * plane],
                            &g[(s * ct + ca) * plane..][..cb * plane],
                        );
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).nchw().expect("rank checked at record time");
                let len = node.value.dims()[1];
                let plane = h * w;
                if let Some(gx) = self.slot(grads, *x) {
                    for s in 0..n {
                        add_into(
                            &mut gx[(s * c + start) * plane..][..len * plane],
                            &g[s * len * plane..][..len * plane],
                        );
                    }
                }
            }
            Op::SoftThreshold { u, lambda } => {
                let us = self.value(*u).data();
                let ls = self.value(*lambda).data();
                let bc = Broadcast::resolve(self.dims(*u), self.dims(*lambda))
                    .expect("broadcast checked at record time");
                if let Some(gu) = self.slot(grads, *u) {
                    for k in 0..g.len() {
                        if us[k].abs() > ls[bc.index(k)] {
                            gu[k] += g[k];
                        }
                    }
                }
                if let Some(gl) = self.slot(grads, *lambda) {
                    for k in 0..g.len() {
                        let c = bc.index(k);
                        if us[k].abs() > ls[c] {
                            gl[c] -= sign(us[k]) * g[k];
                        }
                    }
                }
            }
            Op::DiceBce {
                logits,
                mask,
                bce_weight,
                dice_weight,
            } => {
                let lv = self.value(*logits);
                if let Some(gl) = self.slot(grads, *logits) {
                    crate::loss::dice_bce_backward(lv, mask, *bce_weight, *dice_weight, g[0], gl);
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, allocated on first use; `None` when
    /// `v` does not require a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.requires_grad(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn take_slot(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.requires_grad(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; len]))
    }
}

fn restore(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    if g.is_some() {
        grads[v.0] = g;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
