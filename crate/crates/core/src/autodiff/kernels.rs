//! Forward and vector-Jacobian kernels for the structured primitives.
//!
//! Layouts are channels-last throughout: activations `(n, h, w, c)`,
//! convolution kernels `(kh, kw, c_in, c_out)`.

use crate::error::{Error, Result};

use super::tensor::Float;

pub(crate) fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), T::zero(), &mut out);
    out
}

/// `g · bᵀ` for `g: (m, n)`, `b: (k, n)`.
pub(crate) fn matmul_grad_lhs<T: Float>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    T::gemm(m, n, k, g, (n, 1), b, (1, n), T::zero(), &mut out);
    out
}

/// `aᵀ · g` for `a: (m, k)`, `g: (m, n)`.
pub(crate) fn matmul_grad_rhs<T: Float>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    T::gemm(k, m, n, a, (1, k), g, (n, 1), T::zero(), &mut out);
    out
}

/// Shape bookkeeping for a "same"-padded strided, dilated 2-D convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub c_out: usize,
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: (usize, usize), dilation: (usize, usize)) -> Result<Self> {
        if x.len() != 4 {
            return Err(Error::invalid_shape("conv2d", x, "input must be (batch, h, w, channels)"));
        }
        if w.len() != 4 {
            return Err(Error::invalid_shape("conv2d", w, "kernel must be (kh, kw, c_in, c_out)"));
        }
        if x[3] != w[2] {
            return Err(Error::shape("conv2d channel", x, w));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::InvalidArgument("conv2d dilation must be positive".into()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let out_h = x[1].div_ceil(stride.0);
        let out_w = x[2].div_ceil(stride.1);
        let pad_total = |out: usize, s: usize, k: usize, d: usize, len: usize| {
            ((out - 1) * s + (k - 1) * d + 1).saturating_sub(len)
        };
        let pad_h = pad_total(out_h, stride.0, w[0], dilation.0, x[1]) / 2;
        let pad_w = pad_total(out_w, stride.1, w[1], dilation.1, x[2]) / 2;
        Ok(Conv2dGeometry {
            batch: x[0],
            in_h: x[1],
            in_w: x[2],
            c_in: x[3],
            k_h: w[0],
            k_w: w[1],
            c_out: w[3],
            stride,
            dilation,
            pad: (pad_h, pad_w),
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.c_out]
    }

    #[inline]
    fn source(&self, out: usize, k: usize, axis: usize) -> Option<usize> {
        let (s, d, p, len) = if axis == 0 {
            (self.stride.0, self.dilation.0, self.pad.0, self.in_h)
        } else {
            (self.stride.1, self.dilation.1, self.pad.1, self.in_w)
        };
        let pos = (out * s + k * d) as isize - p as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// Upper bound on the elements of one unfolded patch matrix; images are
/// processed in groups that stay below it.
const COL_BUDGET: usize = 1 << 22;

impl Conv2dGeometry {
    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.c_in
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Images per unfolded group.
    fn group(&self) -> usize {
        (COL_BUDGET / (self.out_pixels() * self.patch_len()).max(1)).clamp(1, self.batch.max(1))
    }

    /// Unfolds images `n0..n0+count` into rows of `(ky, kx, c)` patches,
    /// zero where the patch hangs over the padding.
    fn im2col<T: Float>(&self, x: &[T], n0: usize, count: usize, col: &mut Vec<T>) {
        let (ci, kl) = (self.c_in, self.patch_len());
        col.clear();
        col.resize(count * self.out_pixels() * kl, T::zero());
        for n in 0..count {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((n * self.out_h + oy) * self.out_w + ox) * kl;
                    for ky in 0..self.k_h {
                        let Some(iy) = self.source(oy, ky, 0) else { continue };
                        for kx in 0..self.k_w {
                            let Some(ix) = self.source(ox, kx, 1) else { continue };
                            let src = (((n0 + n) * self.in_h + iy) * self.in_w + ix) * ci;
                            let dst = row + (ky * self.k_w + kx) * ci;
                            col[dst..dst + ci].copy_from_slice(&x[src..src + ci]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch rows back onto images.
    fn col2im<T: Float>(&self, col: &[T], n0: usize, count: usize, gx: &mut [T]) {
        let (ci, kl) = (self.c_in, self.patch_len());
        for n in 0..count {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((n * self.out_h + oy) * self.out_w + ox) * kl;
                    for ky in 0..self.k_h {
                        let Some(iy) = self.source(oy, ky, 0) else { continue };
                        for kx in 0..self.k_w {
                            let Some(ix) = self.source(ox, kx, 1) else { continue };
                            let dst = (((n0 + n) * self.in_h + iy) * self.in_w + ix) * ci;
                            let src = row + (ky * self.k_w + kx) * ci;
                            for (g, &v) in gx[dst..dst + ci].iter_mut().zip(&col[src..src + ci]) {
                                *g += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(x: &[T], w: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let (co, kl, px) = (g.c_out, g.patch_len(), g.out_pixels());
    let mut out = vec![T::zero(); g.batch * px * co];
    let mut col = Vec::new();
    let group = g.group();
    for n0 in (0..g.batch).step_by(group) {
        let count = group.min(g.batch - n0);
        g.im2col(x, n0, count, &mut col);
        let m = count * px;
        T::gemm(m, kl, co, &col, (kl, 1), w, (co, 1), T::zero(), &mut out[n0 * px * co..][..m * co]);
    }
    out
}

pub(crate) fn conv2d_grad_input<T: Float>(gout: &[T], w: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let (co, kl, px) = (g.c_out, g.patch_len(), g.out_pixels());
    let mut gx = vec![T::zero(); g.batch * g.in_h * g.in_w * g.c_in];
    let mut dcol = Vec::new();
    let group = g.group();
    for n0 in (0..g.batch).step_by(group) {
        let count = group.min(g.batch - n0);
        let m = count * px;
        dcol.clear();
        dcol.resize(m * kl, T::zero());
        T::gemm(m, co, kl, &gout[n0 * px * co..][..m * co], (co, 1), w, (1, co), T::zero(), &mut dcol);
        g.col2im(&dcol, n0, count, &mut gx);
    }
    gx
}

pub(crate) fn conv2d_grad_weight<T: Float>(x: &[T], gout: &[T], g: &Conv2dGeometry) -> Vec<T> {
    let (co, kl, px) = (g.c_out, g.patch_len(), g.out_pixels());
    let mut gw = vec![T::zero(); kl * co];
    let mut col = Vec::new();
    let group = g.group();
    for n0 in (0..g.batch).step_by(group) {
        let count = group.min(g.batch - n0);
        g.im2col(x, n0, count, &mut col);
        let m = count * px;
        T::gemm(kl, m, co, &col, (1, kl), &gout[n0 * px * co..][..m * co], (co, 1), T::one(), &mut gw);
    }
    gw
}

/// Pairwise max over axis 1 of `(n, len, c)`. Returns values and the flat
/// source index of each maximum.
pub(crate) fn max_pool1d<T: Float>(x: &[T], n: usize, len: usize, c: usize) -> (Vec<T>, Vec<usize>) {
    let out_len = len / 2;
    let mut out = Vec::with_capacity(n * out_len * c);
    let mut arg = Vec::with_capacity(n * out_len * c);
    for b in 0..n {
        for t in 0..out_len {
            for ch in 0..c {
                let i0 = (b * len + 2 * t) * c + ch;
                let i1 = i0 + c;
                if x[i1] > x[i0] {
                    out.push(x[i1]);
                    arg.push(i1);
                } else {
                    out.push(x[i0]);
                    arg.push(i0);
                }
            }
        }
    }
    (out, arg)
}

/// Per-channel batch mean and biased variance.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[allow(clippy::type_complexity)]
pub(crate) fn batch_norm_forward<T: Float>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>, BatchStats<T>) {
    let rows = x.len() / c;
    let inv_rows = T::one() / T::of(rows as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_rows);
    let mut var = vec![T::zero(); c];
    for row in x.chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_rows);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        for ch in 0..c {
            let h = (row[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(gamma[ch] * h + beta[ch]);
        }
    }
    (out, xhat, inv_std, BatchStats { mean, var })
}

pub(crate) fn batch_norm_backward<T: Float>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = g.len() / c;
    let mut gbeta = vec![T::zero(); c];
    let mut ggamma = vec![T::zero(); c];
    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
        for ch in 0..c {
            gbeta[ch] += gr[ch];
            ggamma[ch] += gr[ch] * hr[ch];
        }
    }
    let m = T::of(rows as f64);
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * inv_std[ch] / m).collect();
    let mut gx = Vec::with_capacity(g.len());
    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
        for ch in 0..c {
            gx.push(scale[ch] * (m * gr[ch] - gbeta[ch] - hr[ch] * ggamma[ch]));
        }
    }
    (gx, ggamma, gbeta)
}

/// Interpolation taps along one axis: for each output index, the
/// contributing input indices and weights.
#[derive(Clone, Debug)]
struct AxisTaps<T> {
    taps: Vec<Vec<(usize, T)>>,
}

impl<T: Float> AxisTaps<T> {
    fn new(in_len: usize, out_len: usize) -> Self {
        if in_len == out_len {
            return AxisTaps {
                taps: (0..out_len).map(|i| vec![(i, T::one())]).collect(),
            };
        }
        let scale = in_len as f64 / out_len as f64;
        let support = scale.max(1.0);
        let taps = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale - 0.5;
                let lo = (center - support).floor().max(0.0) as usize;
                let hi = ((center + support).ceil() as usize).min(in_len - 1);
                let mut row: Vec<(usize, f64)> = (lo..=hi)
                    .map(|p| (p, (1.0 - (p as f64 - center).abs() / support).max(0.0)))
                    .filter(|&(_, w)| w > 0.0)
                    .collect();
                if row.is_empty() {
                    // the sample centre falls outside the input; clamp to the edge
                    let p = center.round().clamp(0.0, (in_len - 1) as f64) as usize;
                    row.push((p, 1.0));
                }
                let total: f64 = row.iter().map(|r| r.1).sum();
                row.into_iter().map(|(p, w)| (p, T::of(w / total))).collect()
            })
            .collect();
        AxisTaps { taps }
    }
}

/// Separable resize of `(n, h, w, c)` images.
#[derive(Clone, Debug)]
pub struct ResizePlan<T> {
    in_h: usize,
    in_w: usize,
    rows: AxisTaps<T>,
    cols: AxisTaps<T>,
}

impl<T: Float> ResizePlan<T> {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_h,
            in_w,
            rows: AxisTaps::new(in_h, out_h),
            cols: AxisTaps::new(in_w, out_w),
        }
    }

    fn out_h(&self) -> usize {
        self.rows.taps.len()
    }

    fn out_w(&self) -> usize {
        self.cols.taps.len()
    }

    pub fn forward(&self, x: &[T], n: usize, c: usize) -> Vec<T> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h(), self.out_w());
        let mut tmp = vec![T::zero(); n * oh * iw * c];
        for b in 0..n {
            for (i, taps) in self.rows.taps.iter().enumerate() {
                let dst = &mut tmp[(b * oh + i) * iw * c..][..iw * c];
                for &(p, wt) in taps {
                    let src = &x[(b * ih + p) * iw * c..][..iw * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        let mut out = vec![T::zero(); n * oh * ow * c];
        for b in 0..n {
            for i in 0..oh {
                for (j, taps) in self.cols.taps.iter().enumerate() {
                    let dst = &mut out[((b * oh + i) * ow + j) * c..][..c];
                    for &(q, wt) in taps {
                        let src = &tmp[((b * oh + i) * iw + q) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, g: &[T], n: usize, c: usize) -> Vec<T> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h(), self.out_w());
        let mut gtmp = vec![T::zero(); n * oh * iw * c];
        for b in 0..n {
            for i in 0..oh {
                for (j, taps) in self.cols.taps.iter().enumerate() {
                    let src = &g[((b * oh + i) * ow + j) * c..][..c];
                    for &(q, wt) in taps {
                        let dst = &mut gtmp[((b * oh + i) * iw + q) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
        let mut gx = vec![T::zero(); n * ih * iw * c];
        for b in 0..n {
            for (i, taps) in self.rows.taps.iter().enumerate() {
                let src = &gtmp[(b * oh + i) * iw * c..][..iw * c];
                for &(p, wt) in taps {
                    let dst = &mut gx[(b * ih + p) * iw * c..][..iw * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        gx
    }
}

/// Uniform B-spline basis on `[lo, hi]` with `grid_size` intervals,
/// extended by `order` knots on each side.
///
/// Inputs outside `[lo, hi]` are evaluated with the polynomial piece of the
/// nearest boundary interval, so the basis still sums to one there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsplineGrid {
    pub grid_size: usize,
    pub order: usize,
    pub lo: f64,
    pub hi: f64,
}

impl BsplineGrid {
    pub fn new(grid_size: usize, order: usize, lo: f64, hi: f64) -> Result<Self> {
        if grid_size == 0 || hi <= lo {
            return Err(Error::InvalidArgument(format!(
                "B-spline grid needs at least one interval and lo < hi (got {grid_size} on [{lo}, {hi}])"
            )));
        }
        Ok(BsplineGrid {
            grid_size,
            order,
            lo,
            hi,
        })
    }

    pub fn basis_len(&self) -> usize {
        self.grid_size + self.order
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.grid_size as f64
    }

    /// Extended knot vector, `grid_size + 2 * order + 1` strictly increasing values.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.grid_size + 2 * self.order)
            .map(|i| self.lo + (i as f64 - self.order as f64) * h)
            .collect()
    }

    fn span(&self, x: f64) -> usize {
        let s = ((x - self.lo) / self.step()).floor();
        if s.is_nan() || s < 0.0 {
            0
        } else {
            (s as usize).min(self.grid_size - 1)
        }
    }

    /// The `order + 1` basis values that are non-zero on the interval of
    /// `x`, plus their derivatives. Entry `r` belongs to global basis
    /// function `span + r`.
    pub fn local(&self, x: f64) -> (usize, Vec<f64>, Vec<f64>) {
        let k = self.order;
        let s = self.span(x);
        let h = self.step();
        let mu = s + k;
        let knot = |i: usize| self.lo + (i as f64 - k as f64) * h;
        let mut vals = vec![0.0; k + 1];
        let mut lower = vec![0.0; k.max(1)];
        vals[0] = 1.0;
        if k == 0 {
            return (s, vals, vec![0.0]);
        }
        let mut left = vec![0.0; k + 1];
        let mut right = vec![0.0; k + 1];
        for j in 1..=k {
            if j == k {
                lower.copy_from_slice(&vals[..k]);
            }
            left[j] = x - knot(mu + 1 - j);
            right[j] = knot(mu + j) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        let deriv = (0..=k)
            .map(|r| {
                let a = if r >= 1 { lower[r - 1] } else { 0.0 };
                let b = if r < k { lower[r] } else { 0.0 };
                (a - b) / h
            })
            .collect();
        (s, vals, deriv)
    }

    pub(crate) fn evaluate<T: Float>(&self, x: &[T]) -> (Vec<T>, Vec<usize>, Vec<T>) {
        let nb = self.basis_len();
        let k1 = self.order + 1;
        let mut out = vec![T::zero(); x.len() * nb];
        let mut spans = Vec::with_capacity(x.len());
        let mut deriv = Vec::with_capacity(x.len() * k1);
        for (e, &xv) in x.iter().enumerate() {
            let (s, vals, d) = self.local(xv.f64());
            for (r, &v) in vals.iter().enumerate() {
                out[e * nb + s + r] = T::of(v);
            }
            spans.push(s);
            deriv.extend(d.into_iter().map(T::of));
        }
        (out, spans, deriv)
    }

    pub(crate) fn backward<T: Float>(&self, g: &[T], spans: &[usize], deriv: &[T]) -> Vec<T> {
        let nb = self.basis_len();
        let k1 = self.order + 1;
        spans
            .iter()
            .enumerate()
            .map(|(e, &s)| {
                (0..k1)
                    .map(|r| g[e * nb + s + r] * deriv[e * k1 + r])
                    .fold(T::zero(), |a, b| a + b)
            })
            .collect()
    }
}
