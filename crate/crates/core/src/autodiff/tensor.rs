use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    fn of(v: f64) -> Self;

    fn f64(self) -> f64;

    /// `c ← a·b + beta·c` for `a: (m, k)`, `b: (k, n)`, `c: (m, n)`, each
    /// given with its own row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self]);
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize), c: &[T]) {
    let last = |rows: usize, cols: usize, s: (usize, usize)| (rows.max(1) - 1) * s.0 + (cols.max(1) - 1) * s.1;
    assert!(m == 0 || k == 0 || last(m, k, sa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || n == 0 || last(k, n, sb) < b.len(), "gemm: rhs out of bounds");
    assert!(c.len() >= m * n, "gemm: output too small");
}

/// Below this size on any side the blocked kernel spends more time packing
/// than multiplying.
const SKINNY: usize = 16;

fn is_skinny(m: usize, k: usize, n: usize) -> bool {
    m < SKINNY || k < SKINNY || n < SKINNY
}

/// Copies a strided `(rows, cols)` matrix into row-major order.
fn pack<T: Copy>(src: &[T], rows: usize, cols: usize, s: (usize, usize)) -> Vec<T> {
    if s == (cols, 1) {
        return src[..rows * cols].to_vec();
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend((0..cols).map(|c| src[r * s.0 + c * s.1]));
    }
    out
}

/// Product with a narrow right-hand side, `n ≤ N`, where `N` is a
/// compile-time width so the per-row accumulator lives in registers.
fn gemm_narrow<T: Float, const N: usize>(m: usize, k: usize, n: usize, a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize), c: &mut [T]) {
    let mut bp = vec![T::zero(); k * N];
    for p in 0..k {
        for j in 0..n {
            bp[p * N + j] = b[p * sb.0 + j * sb.1];
        }
    }
    let mut acc = vec![[T::zero(); N]; m];
    if sa.1 == 1 {
        // four rows at a time hide the add latency of each accumulator
        const R: usize = 4;
        for (blk, outs) in acc.chunks_mut(R).enumerate() {
            let i0 = blk * R;
            if outs.len() < R {
                for (r, out) in outs.iter_mut().enumerate() {
                    let row = &a[(i0 + r) * sa.0..][..k];
                    for (p, &av) in row.iter().enumerate() {
                        for j in 0..N {
                            out[j] += av * bp[p * N + j];
                        }
                    }
                }
                continue;
            }
            let mut regs = [[T::zero(); N]; R];
            for p in 0..k {
                let brow: &[T; N] = bp[p * N..(p + 1) * N].try_into().expect("width");
                for (r, reg) in regs.iter_mut().enumerate() {
                    let av = a[(i0 + r) * sa.0 + p];
                    for j in 0..N {
                        reg[j] += av * brow[j];
                    }
                }
            }
            outs.copy_from_slice(&regs);
        }
    } else {
        // column-major lhs: stream each column, keeping the output in cache
        for p in 0..k {
            let brow: &[T; N] = bp[p * N..(p + 1) * N].try_into().expect("width");
            for (i, out) in acc.iter_mut().enumerate() {
                let av = a[i * sa.0 + p * sa.1];
                for j in 0..N {
                    out[j] += av * brow[j];
                }
            }
        }
    }
    for (i, row) in acc.iter().enumerate() {
        for j in 0..n {
            c[i * n + j] += row[j];
        }
    }
}

/// Plain kernels for matrices with a short side.
#[allow(clippy::too_many_arguments)]
fn gemm_skinny<T: Float>(m: usize, k: usize, n: usize, a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize), beta: T, c: &mut [T]) {
    for v in &mut c[..m * n] {
        *v = if beta == T::zero() { T::zero() } else { *v * beta };
    }
    match n {
        1 => return gemm_narrow::<T, 1>(m, k, n, a, sa, b, sb, c),
        2 => return gemm_narrow::<T, 2>(m, k, n, a, sa, b, sb, c),
        3..=4 => return gemm_narrow::<T, 4>(m, k, n, a, sa, b, sb, c),
        5..=8 => return gemm_narrow::<T, 8>(m, k, n, a, sa, b, sb, c),
        9..=16 => return gemm_narrow::<T, 16>(m, k, n, a, sa, b, sb, c),
        _ => {}
    }
    let a = pack(a, m, k, sa);
    let b = pack(b, k, n, sb);
    for i in 0..m {
        let out = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

impl Float for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        if m == 0 || n == 0 {
            return;
        }
        if is_skinny(m, k, n) {
            return gemm_skinny(m, k, n, a, sa, b, sb, beta, c);
        }
        // SAFETY: every index touched is bounded by the checks above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        if m == 0 || n == 0 {
            return;
        }
        if is_skinny(m, k, n) {
            return gemm_skinny(m, k, n, a, sa, b, sb, beta, c);
        }
        // SAFETY: every index touched is bounded by the checks above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major n-dimensional array.
///
/// A tensor with an empty shape is a scalar holding one element.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid_shape("tensor", &shape, "extents must be positive"));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                &shape,
                format!("shape holds {} values but {} were given", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape and length are known to agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice of `f64`, converted to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a scalar or single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.rank(), 2, "row() requires a matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_lengths() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(3.0f64);
        assert_eq!(s.numel(), 1);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 3.0);
    }

    #[test]
    fn get_is_row_major() {
        let t = Tensor::<f64>::from_f64(vec![2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
    }
}
