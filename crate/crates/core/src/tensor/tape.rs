use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, col2im, conv2d_forward, gemm, gemm_tn, ConvGeometry};
use super::{broadcast_shape, broadcast_strides, Tensor};
use crate::math;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Elementwise {
        kind: ElementwiseOp,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    Cosine {
        x: Var,
        direction: Vec<f64>,
        direction_norm: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Elementwise { kind, .. } => match kind {
                ElementwiseOp::Add => "add",
                ElementwiseOp::Sub => "sub",
                ElementwiseOp::Mul => "mul",
            },
            Op::Scale { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::Softplus { .. } => "softplus",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Cosine { .. } => "cosine",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Elementwise { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Concat { parts } => parts.clone(),
            Op::Scale { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Relu { x }
            | Op::Softplus { x }
            | Op::MaxPool2 { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sum { x }
            | Op::SumAxis { x, .. }
            | Op::Cosine { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations. Append order is a topological
/// order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Norms below this are treated as zero by [`Tape::cosine`].
pub(crate) const ZERO_NORM: f64 = 1e-12;

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

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
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

    /// Gradient from the most recent [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op.name())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::ShapeMismatch {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            }
        })?;
        let f = match kind {
            ElementwiseOp::Add => |x: f64, y: f64| x + y,
            ElementwiseOp::Sub => |x: f64, y: f64| x - y,
            ElementwiseOp::Mul => |x: f64, y: f64| x * y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |ia, ib| {
                data.push(f(ta.data()[ia], tb.data()[ib]));
            });
            data
        };
        let value = Tensor::new(out_shape, data)?;
        self.record(value, Op::Elementwise { kind, a, b }, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.record(value, Op::Scale { x, factor }, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.record(value, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::new(vec![c, r], kernels::transpose(t.data(), r, c))?;
        self.record(value, Op::Transpose { x }, "transpose")
    }

    /// Explicit reshape; the element count must not change.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.record(value, Op::Reshape { x }, "reshape")
    }

    /// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, pad, dilation)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![geom.out_channels],
                });
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let (out, cols) = conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let value = Tensor::new(vec![geom.out_channels, geom.out_height, geom.out_width], out)?;
        // Patch columns are only needed for the weight gradient.
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        self.record(value, Op::Conv2d { x, w, b, geom, cols }, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.record(value, Op::Relu { x }, "relu")
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(softplus);
        self.record(value, Op::Softplus { x }, "softplus")
    }

    /// 2×2 max pooling with stride 2 over `[C×H×W]`, `H` and `W` even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::IndivisibleShape {
                height: s.get(1).copied().unwrap_or(0),
                width: s.get(2).copied().unwrap_or(0),
                factor: 2,
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let d = t.data();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.record(value, Op::MaxPool2 { x, argmax }, "max_pool2")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = math::exp(out[at(j)] - max);
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.record(value, Op::Softmax { x, axis }, "softmax")
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        self.record(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            "concat",
        )
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(value, Op::Sum { x }, "sum")
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.record(value, Op::SumAxis { x, axis }, "sum_axis")
    }

    /// Cosine similarity between a fixed direction `[C]` and every spatial
    /// column of `x[C×H×W]`, giving `[1×H×W]`. A zero-norm column or
    /// direction yields 0. The direction is a constant: no gradient reaches it.
    pub fn cosine(&mut self, x: Var, direction: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || s[0] != direction.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                lhs: s.to_vec(),
                rhs: vec![direction.len()],
            });
        }
        let (c, n) = (s[0], s[1] * s[2]);
        let dnorm = math::sqrt(direction.iter().map(|v| v * v).sum());
        let mut out = vec![0.0; n];
        if dnorm >= ZERO_NORM {
            let d = t.data();
            let mut dots = vec![0.0; n];
            let mut sq = vec![0.0; n];
            for ch in 0..c {
                let row = &d[ch * n..(ch + 1) * n];
                let p = direction[ch];
                for ((dot, q), &v) in dots.iter_mut().zip(sq.iter_mut()).zip(row) {
                    *dot += p * v;
                    *q += v * v;
                }
            }
            for ((o, dot), q) in out.iter_mut().zip(&dots).zip(&sq) {
                let qn = math::sqrt(*q);
                if qn >= ZERO_NORM {
                    *o = dot / (dnorm * qn);
                }
            }
        }
        let value = Tensor::new(vec![1, s[1], s[2]], out)?;
        self.record(
            value,
            Op::Cosine {
                x,
                direction: direction.to_vec(),
                direction_norm: dnorm,
            },
            "cosine",
        )
    }

    /// Reverse sweep from a one-element `loss`. Gradients from any previous
    /// call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.nodes.get(loss.0).ok_or(Error::DetachedGraph)?;
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Tensor::new(n.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Elementwise { kind, a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = wants(*a).then(|| vec![0.0; ta.len()]);
                let mut gb = wants(*b).then(|| vec![0.0; tb.len()]);
                let mut i = 0;
                for_each_broadcast(node.value.shape(), ta.shape(), tb.shape(), |ia, ib| {
                    let gi = g[i];
                    i += 1;
                    let (da, db) = match kind {
                        ElementwiseOp::Add => (gi, gi),
                        ElementwiseOp::Sub => (gi, -gi),
                        ElementwiseOp::Mul => (gi * tb.data()[ib], gi * ta.data()[ia]),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale { x, factor } => {
                let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                accumulate(grads, *x, &gx);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let bt = kernels::transpose(tb.data(), k, n);
                    let mut ga = vec![0.0; m * k];
                    gemm(g, &bt, &mut ga, m, n, k);
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(ta.data(), g, &mut gb, k, m, n);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose { x } => {
                let s = val(*x).shape();
                let gx = kernels::transpose(g, s[1], s[0]);
                accumulate(grads, *x, &gx);
            }
            Op::Reshape { x } => accumulate(grads, *x, g),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = geom.out_cells();
                let k = geom.patch_len();
                if wants(*w) {
                    let cols_t = kernels::transpose(cols, k, n);
                    let mut gw = vec![0.0; geom.out_channels * k];
                    gemm(g, &cols_t, &mut gw, geom.out_channels, n, k);
                    accumulate(grads, *w, &gw);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let gb: Vec<f64> = g.chunks_exact(n).map(|r| r.iter().sum()).collect();
                    accumulate(grads, b, &gb);
                }
                if wants(*x) {
                    let mut gcols = vec![0.0; k * n];
                    gemm_tn(val(*w).data(), g, &mut gcols, k, geom.out_channels, n);
                    let mut gx = vec![0.0; val(*x).len()];
                    col2im(&gcols, geom, &mut gx);
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Relu { x } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Softplus { x } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| g * sigmoid(*v))
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gi, &src) in g.iter().zip(argmax) {
                    gx[src] += gi;
                }
                accumulate(grads, *x, &gx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) =
                    axis_split(node.value.shape(), *axis).expect("axis validated on record");
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    if wants(*p) {
                        accumulate(grads, *p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum { x } => {
                let gx = vec![g[0]; val(*x).len()];
                accumulate(grads, *x, &gx);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) =
                    axis_split(val(*x).shape(), *axis).expect("axis validated on record");
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    for j in 0..len {
                        gx[(o * len + j) * inner..(o * len + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Cosine {
                x,
                direction,
                direction_norm,
            } => {
                if *direction_norm < ZERO_NORM {
                    return;
                }
                let t = val(*x);
                let (c, n) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
                let d = t.data();
                let cos = node.value.data();
                let mut sq = vec![0.0; n];
                for ch in 0..c {
                    for (q, v) in sq.iter_mut().zip(&d[ch * n..(ch + 1) * n]) {
                        *q += v * v;
                    }
                }
                // d cos / d x = p / (|p| |x|) - cos · x / |x|²
                let mut gx = vec![0.0; d.len()];
                for ch in 0..c {
                    let p = direction[ch] / direction_norm;
                    for cell in 0..n {
                        let qn = math::sqrt(sq[cell]);
                        if qn < ZERO_NORM {
                            continue;
                        }
                        let xv = d[ch * n + cell];
                        gx[ch * n + cell] = g[cell] * (p / qn - cos[cell] * xv / sq[cell]);
                    }
                }
                accumulate(grads, *x, &gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfBounds {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Visit every output cell of a broadcast in row-major order with the
/// matching flat indices into each operand.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out.iter().product();
    if a == b {
        for i in 0..total {
            f(i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total {
        f(ia, ib);
        for d in (0..rank).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + math::ln1p(math::exp(-x))
    } else {
        math::ln1p(math::exp(x))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}
