//! Dense row-major matrices and the handful of kernels the transformer needs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type for model storage and compute.
pub trait Scalar:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        f64::from(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: S) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn cols_slice(&self, start: usize, width: usize) -> Mat<S> {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Adds `src` into columns `[start, start + src.cols)`.
    pub fn add_cols(&mut self, start: usize, src: &Mat<S>) {
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + src.cols];
            for (d, s) in dst.iter_mut().zip(src.row(r)) {
                *d += *s;
            }
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `x · wᵀ` where `w` is `(out × in)` row-major.
pub fn matmul_nt<S: Scalar>(x: &Mat<S>, w: &[S], out: usize) -> Mat<S> {
    let inp = x.cols;
    debug_assert_eq!(w.len(), out * inp);
    let mut y = Mat::zeros(x.rows, out);
    for t in 0..x.rows {
        let xr = x.row(t);
        let yr = y.row_mut(t);
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * inp..(o + 1) * inp]);
        }
    }
    y
}

/// `dy · w` where `w` is `(out × in)`; the input-gradient of [`matmul_nt`].
pub fn matmul_nn<S: Scalar>(dy: &Mat<S>, w: &[S], inp: usize) -> Mat<S> {
    let out = dy.cols;
    debug_assert_eq!(w.len(), out * inp);
    let mut dx = Mat::zeros(dy.rows, inp);
    for t in 0..dy.rows {
        let dyr = dy.row(t);
        let dxr = dx.row_mut(t);
        for (o, &g) in dyr.iter().enumerate() {
            if g != S::zero() {
                axpy(g, &w[o * inp..(o + 1) * inp], dxr);
            }
        }
    }
    dx
}

/// Accumulates `dyᵀ · x` into `dw` (`out × in`); the weight-gradient of [`matmul_nt`].
pub fn accumulate_tn<S: Scalar>(dy: &Mat<S>, x: &Mat<S>, dw: &mut [S]) {
    let inp = x.cols;
    debug_assert_eq!(dw.len(), dy.cols * inp);
    for t in 0..dy.rows {
        let xr = x.row(t);
        for (o, &g) in dy.row(t).iter().enumerate() {
            if g != S::zero() {
                axpy(g, xr, &mut dw[o * inp..(o + 1) * inp]);
            }
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one row into a new vector.
pub fn log_softmax<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}
