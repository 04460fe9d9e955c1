//! Scalar abstraction, the latent grid type and the dense kernels the model is
//! built from. Everything is row-major.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point type the model and the samplers can run in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `v ← exp(v)` over a slice.
    fn exp_in_place(values: &mut [Self]) {
        values.iter_mut().for_each(|v| *v = v.exp());
    }

    /// Raw strided GEMM, `C ← α·A·B + β·C`.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// lie inside the pointed-to allocations, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn exp_in_place(values: &mut [Self]) {
        values.iter_mut().for_each(|v| *v = exp_f32(*v));
    }
}

/// Branch-free `exp` for f32 (range reduction by ln 2 and a degree-6
/// polynomial), within 2 ulp of the libm result on `[-87, 88]`. Inputs below
/// -87 flush to zero.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // 1.5·2²³: adding it rounds to an integer held in the low mantissa bits.
    const ROUND: f32 = 12_582_912.0;
    let keep = if x < -87.0 { 1.0f32 } else { 0.0 };
    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let e = (p * r * r + r) + 1.0;
    let scale = f32::from_bits((t.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127)) << 23);
    e * scale * (1.0 - keep)
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl GridShape {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// An h×w×c grid; element `(row, col, ch)` lives at `(row * w + col) * c + ch`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T> {
    shape: GridShape,
    data: Vec<T>,
}

impl<T: Real> Latent<T> {
    pub fn zeros(shape: GridShape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: GridShape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: GridShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.shape.w + col) * self.shape.c + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: T) {
        let idx = (row * self.shape.w + col) * self.shape.c + ch;
        self.data[idx] = value;
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// Elementwise `alpha * self + beta * other`.
    pub fn lincomb(&self, alpha: T, other: &Self, beta: T) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| alpha * a + beta * b)
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Latent<U> {
        Latent {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }
}

/// Strided view of a `rows×cols` matrix stored in `data`.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

#[derive(Debug)]
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows×cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Columns `off..off+cols` of a row-major matrix with row length `ld`.
    pub fn cols_of(data: &'a [T], rows: usize, ld: usize, off: usize, cols: usize) -> Self {
        MatRef {
            data: &data[off..],
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, ld: usize, off: usize, cols: usize) -> Self {
        MatMut {
            data: &mut data[off..],
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }
}

/// `C ← α·A·B + β·C`. With `β = 0` the previous contents of `C` are ignored.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output dimension");
    assert!(span(a.rows, a.cols, a.rs, a.cs) <= a.data.len());
    assert!(span(b.rows, b.cols, b.rs, b.cs) <= b.data.len());
    assert!(span(c.rows, c.cols, c.rs, c.cs) <= c.data.len());
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: the spans were checked above and `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        MatRef::dense(a, m, k),
        MatRef::dense(b, k, n),
        T::one(),
        MatMut::dense(out, m, n),
    );
}

/// `out[k×n] += aᵀ · b` with `a: m×k`, `b: m×n`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        MatRef::dense(a, m, k).t(),
        MatRef::dense(b, m, n),
        T::one(),
        MatMut::dense(out, k, n),
    );
}

/// `out[m×k] += a · bᵀ` with `a: m×n`, `b: k×n`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    gemm(
        T::one(),
        MatRef::dense(a, m, n),
        MatRef::dense(b, k, n).t(),
        T::one(),
        MatMut::dense(out, m, k),
    );
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Row-wise softmax in place over `cols`-wide rows. Entries where `mask` is
/// false get probability zero; a row with every entry masked stays all-zero.
pub fn softmax_rows<T: Real>(data: &mut [T], cols: usize, mask: Option<&[bool]>) {
    for row in data.chunks_exact_mut(cols) {
        softmax_in_place(row, mask);
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T], mask: Option<&[bool]>) {
    let max = match mask {
        None => row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)),
        Some(m) => row.iter().zip(m).fold(T::neg_infinity(), |acc, (&v, &k)| {
            acc.max(if k { v } else { T::neg_infinity() })
        }),
    };
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    row.iter_mut().for_each(|v| *v -= max);
    T::exp_in_place(row);
    if let Some(m) = mask {
        for (v, &k) in row.iter_mut().zip(m) {
            *v = if k { *v } else { T::zero() };
        }
    }
    let inv = T::one() / sum(row);
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Sum with eight independent partial sums so the loop vectorizes.
pub fn sum<T: Real>(values: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = values.chunks_exact(8);
    for c in &mut chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    let tail: T = chunks.remainder().iter().copied().sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Given softmax output `p` and cotangent `dp`, overwrite `dp` with the
/// cotangent of the logits.
pub fn softmax_backward_in_place<T: Real>(p: &[T], dp: &mut [T]) {
    let inner = dot(p, dp);
    for (g, &pv) in dp.iter_mut().zip(p) {
        *g = pv * (*g - inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-12);
            }
        }

        // aᵀ·c with a: m×k, c: m×n
        let c: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.5 - 2.0).collect();
        let mut tn = vec![0.0; k * n];
        matmul_tn_acc(&a, &c, &mut tn, m, k, n);
        for i in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|t| a[t * k + i] * c[t * n + j]).sum();
                assert!((tn[i * n + j] - want).abs() < 1e-12);
            }
        }

        // c·bᵀ with c: m×n, b: k×n
        let mut nt = vec![0.0; m * k];
        matmul_nt_acc(&c, &b, &mut nt, m, n, k);
        for i in 0..m {
            for j in 0..k {
                let want: f64 = (0..n).map(|t| c[i * n + t] * b[j * n + t]).sum();
                assert!((nt[i * k + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_exp_tracks_libm() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 88.0 {
            let got = exp_f32(x) as f64;
            let want = (x as f64).exp();
            worst = worst.max(((got - want) / want).abs());
            x += 0.0137;
        }
        assert!(worst < 3e-7, "relative error {worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert_eq!(exp_f32(-1e4), 0.0);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut row = vec![1.0f64, 2.0, 3.0];
        softmax_in_place(&mut row, Some(&[true, false, true]));
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);

        let mut dead = vec![1.0f64, 2.0];
        softmax_in_place(&mut dead, Some(&[false, false]));
        assert_eq!(dead, vec![0.0, 0.0]);
    }

    #[test]
    fn latent_shape_checks() {
        let s = GridShape::new(2, 2, 3);
        assert!(Latent::<f32>::from_vec(s, vec![0.0; 11]).is_err());
        let a = Latent::<f32>::zeros(s);
        let b = Latent::<f32>::zeros(GridShape::new(2, 3, 2));
        assert!(a.lincomb(1.0, &b, 1.0).is_err());
    }
}
