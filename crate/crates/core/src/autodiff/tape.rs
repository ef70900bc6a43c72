//! Eager reverse-mode tape.
//!
//! Every primitive evaluates immediately and appends a node holding its value
//! and the information needed for its vector-Jacobian product. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and `backward` is a single reverse sweep.

use crate::error::{Error, Result};

use super::kernels::{self, BatchStats, BsplineGrid, Conv2dGeometry, ResizePlan};
use super::tensor::{numel, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Silu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Square,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Recip => "recip",
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Float>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

fn apply_unary<T: Float>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Relu => x.max(T::zero()),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Silu => x * sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Recip => T::one() / x,
    }
}

/// Derivative of `kind` at input `x` with output `y`.
fn unary_grad<T: Float>(kind: Unary, x: T, y: T) -> T {
    let one = T::one();
    match kind {
        Unary::Relu => {
            if x > T::zero() {
                one
            } else {
                T::zero()
            }
        }
        Unary::Sigmoid => y * (one - y),
        Unary::Tanh => one - y * y,
        Unary::Silu => {
            let s = sigmoid(x);
            s * (one + x * (one - s))
        }
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Log => one / x,
        Unary::Sqrt => T::of(0.5) / y,
        Unary::Square => T::of(2.0) * x,
        Unary::Recip => -y * y,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// Right operand repeats with period `n` over the flat left index.
    Suffix(usize),
    /// Explicit right index for every left index.
    Map(Vec<usize>),
}

impl Broadcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }
}

/// Trailing-dimension broadcasting of `rhs` into `lhs`. The output always
/// has the shape of `lhs`.
fn broadcast_plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if rhs.len() > lhs.len() {
        return Err(Error::shape(op, lhs, rhs));
    }
    let offset = lhs.len() - rhs.len();
    for (i, &r) in rhs.iter().enumerate() {
        if r != 1 && r != lhs[offset + i] {
            return Err(Error::shape(op, lhs, rhs));
        }
    }
    let lead = rhs.iter().take_while(|&&r| r == 1).count();
    let core = &rhs[lead..];
    if lhs.ends_with(core) {
        return Ok(Broadcast::Suffix(numel(core)));
    }
    // general case: stride 0 along broadcast axes
    let mut strides = vec![0usize; lhs.len()];
    let mut acc = 1;
    for i in (0..rhs.len()).rev() {
        if rhs[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= rhs[i];
    }
    let n = numel(lhs);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; lhs.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(a, b)| a * b).sum());
        for ax in (0..lhs.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < lhs[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Broadcast::Map(map))
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Huber {
        x: Var,
        delta: T,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAll {
        x: Var,
    },
    SumAxis {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Conv2dGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Resize {
        x: Var,
        plan: ResizePlan<T>,
    },
    Bspline {
        x: Var,
        grid: BsplineGrid,
        spans: Vec<usize>,
        deriv: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => kind.name(),
            Op::Unary { kind, .. } => kind.name(),
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Clamp { .. } => "clamp",
            Op::Huber { .. } => "huber",
            Op::MatMul { .. } => "matmul",
            Op::SumAll { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Resize { .. } => "resize",
            Op::Bspline { .. } => "bspline_basis",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording of primitive operations for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    first_non_finite: Option<&'static str>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.consumed = false;
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

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let plan = broadcast_plan(kind.name(), av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = match kind {
            Binary::Add => ad.iter().enumerate().map(|(i, &x)| x + bd[plan.index(i)]).collect(),
            Binary::Sub => ad.iter().enumerate().map(|(i, &x)| x - bd[plan.index(i)]).collect(),
            Binary::Mul => ad.iter().enumerate().map(|(i, &x)| x * bd[plan.index(i)]).collect(),
            Binary::Div => ad.iter().enumerate().map(|(i, &x)| x / bd[plan.index(i)]).collect(),
        };
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b, plan }, rg))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| apply_unary(kind, v));
        let rg = self.rg(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(Unary::Recip, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    /// Elementwise Huber penalty of a residual.
    pub fn huber(&mut self, x: Var, delta: T) -> Var {
        let half = T::of(0.5);
        let value = self.nodes[x.0].value.map(|r| {
            let a = r.abs();
            if a <= delta {
                half * r * r
            } else {
                delta * (a - half * delta)
            }
        });
        let rg = self.rg(x);
        self.push(value, Op::Huber { x, delta }, rg)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    // ---- reductions and shape -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::invalid_shape("sum_axis", shape, format!("no axis {axis}")));
        }
        let outer = numel(&shape[..axis]);
        let extent = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &d[(o * extent + e) * inner..][..inner];
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let value = Tensor::from_parts(new_shape, out);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SumAxis {
                x,
                outer,
                extent,
                inner,
            },
            rg,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid_shape("mean_axis", self.shape(x), format!("no axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(extent as f64)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid_shape("concat", &first, format!("no axis {axis}")));
        }
        let mut total = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            sizes.push((p, s[axis]));
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &sizes {
                let d = self.nodes[p.0].value.data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: sizes,
                outer,
                inner,
            },
            rg,
        ))
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid_shape(
                "slice",
                &shape,
                format!("cannot take [{start}, {}) on axis {axis}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let extent = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let d = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * extent + start) * inner..(o * extent + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            Op::Slice {
                x,
                outer,
                extent,
                inner,
                start,
                len,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let cols = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::invalid_shape("softmax", xv.shape(), "needs at least one axis"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, cols }, rg))
    }

    // ---- structured kernels ---------------------------------------------

    /// 2-D convolution of `(n, h, w, c_in)` with a `(kh, kw, c_in, c_out)`
    /// kernel, "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), dilation: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geom = Conv2dGeometry::new(&xs, &ws, stride, dilation)?;
        let out = kernels::conv2d_forward(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), &geom);
        let value = Tensor::from_parts(geom.output_shape(), out);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    /// Non-overlapping max pooling by 2 along axis 1 of `(n, len, c)`;
    /// an odd trailing element is dropped.
    pub fn max_pool1d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] < 2 {
            return Err(Error::invalid_shape("max_pool1d", &shape, "expected (batch, len >= 2, channels)"));
        }
        let (out, argmax) = kernels::max_pool1d(self.nodes[x.0].value.data(), shape[0], shape[1], shape[2]);
        let value = Tensor::from_parts(vec![shape[0], shape[1] / 2, shape[2]], out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Batch normalization over every axis but the last, using batch
    /// statistics. Returns the normalized output and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid_shape("batch_norm", &shape, "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let (out, xhat, inv_std, stats) = kernels::batch_norm_forward(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            c,
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Separable linear resize of `(n, h, w, c)` to `(n, out_h, out_w, c)`.
    /// Downscaling uses a triangle filter widened by the scale factor; equal
    /// sizes copy the input exactly.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid_shape("resize", &shape, "expected (batch, h, w, c)"));
        }
        let plan = ResizePlan::new(shape[1], shape[2], out_h, out_w);
        let out = plan.forward(self.nodes[x.0].value.data(), shape[0], shape[3]);
        let value = Tensor::from_parts(vec![shape[0], out_h, out_w, shape[3]], out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Resize { x, plan }, rg))
    }

    /// Evaluates every B-spline basis function of `grid` at each entry of a
    /// `(rows, features)` input, producing `(rows, features * grid.basis_len())`.
    pub fn bspline_basis(&mut self, x: Var, grid: BsplineGrid) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid_shape("bspline_basis", &shape, "expected (rows, features)"));
        }
        let (out, spans, deriv) = grid.evaluate(self.nodes[x.0].value.data());
        let value = Tensor::from_parts(vec![shape[0], shape[1] * grid.basis_len()], out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Bspline { x, grid, spans, deriv }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Recorded operations are cleared
    /// afterwards; values stay readable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                op: self.first_non_finite.unwrap_or("loss"),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g.data(), &mut grads);
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, plan } => {
                let (a, b) = (*a, *b);
                let ad = val(a).data();
                let bd = val(b).data();
                if self.rg(a) {
                    let ga: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(i, &g)| g * bd[plan.index(i)]).collect(),
                        Binary::Div => g.iter().enumerate().map(|(i, &g)| g / bd[plan.index(i)]).collect(),
                    };
                    add_into(grads, a, val(a).shape(), ga);
                }
                if self.rg(b) {
                    let mut gb = vec![T::zero(); bd.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = plan.index(i);
                        gb[j] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * ad[i],
                            Binary::Div => -gi * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    add_into(grads, b, val(b).shape(), gb);
                }
            }
            Op::Unary { kind, x } => {
                let xd = val(*x).data();
                let gx = g
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(&g, (&x, &y))| g * unary_grad(*kind, x, y))
                    .collect();
                add_into(grads, *x, val(*x).shape(), gx);
            }
            Op::Scale { x, factor } => {
                add_into(grads, *x, val(*x).shape(), g.iter().map(|&g| g * *factor).collect());
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                add_into(grads, *x, val(*x).shape(), g.to_vec());
            }
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x).data();
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                add_into(grads, *x, val(*x).shape(), gx);
            }
            Op::Huber { x, delta } => {
                let xd = val(*x).data();
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&g, &r)| g * if r.abs() <= *delta { r } else { *delta * r.signum() })
                    .collect();
                add_into(grads, *x, val(*x).shape(), gx);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let ga = kernels::matmul_grad_lhs(g, val(*b).data(), m, k, n);
                    add_into(grads, *a, &[m, k], ga);
                }
                if self.rg(*b) {
                    let gb = kernels::matmul_grad_rhs(val(*a).data(), g, m, k, n);
                    add_into(grads, *b, &[k, n], gb);
                }
            }
            Op::SumAll { x } => {
                let xs = val(*x);
                add_into(grads, *x, xs.shape(), vec![g[0]; xs.numel()]);
            }
            Op::SumAxis {
                x,
                outer,
                extent,
                inner,
            } => {
                let mut gx = Vec::with_capacity(outer * extent * inner);
                for o in 0..*outer {
                    for _ in 0..*extent {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                add_into(grads, *x, val(*x).shape(), gx);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(grads, p, val(p).shape(), gp);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                extent,
                inner,
                start,
                len,
            } => {
                let mut gx = vec![T::zero(); outer * extent * inner];
                for o in 0..*outer {
                    let dst = (o * extent + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(grads, *x, val(*x).shape(), gx);
            }
            Op::Softmax { x, cols } => {
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                add_into(grads, *x, val(*x).shape(), gx);
            }
            Op::Conv2d { x, w, geom } => {
                if self.rg(*x) {
                    let gx = kernels::conv2d_grad_input(g, val(*w).data(), geom);
                    add_into(grads, *x, val(*x).shape(), gx);
                }
                if self.rg(*w) {
                    let gw = kernels::conv2d_grad_weight(val(*x).data(), g, geom);
                    add_into(grads, *w, val(*w).shape(), gw);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
                add_into(grads, *x, val(*x).shape(), gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let (gx, ggamma, gbeta) = kernels::batch_norm_backward(g, xhat, inv_std, val(*gamma).data(), c);
                if self.rg(*x) {
                    add_into(grads, *x, val(*x).shape(), gx);
                }
                if self.rg(*gamma) {
                    add_into(grads, *gamma, &[c], ggamma);
                }
                if self.rg(*beta) {
                    add_into(grads, *beta, &[c], gbeta);
                }
            }
            Op::Resize { x, plan } => {
                let xs = val(*x).shape();
                let gx = plan.backward(g, xs[0], xs[3]);
                add_into(grads, *x, xs, gx);
            }
            Op::Bspline { x, grid, spans, deriv } => {
                let gx = grid.backward(g, spans, deriv);
                add_into(grads, *x, val(*x).shape(), gx);
            }
        }
    }
}
