//! Dense row-major matrices over `f64` and the seedable generator used
//! everywhere a random draw is needed.
//!
//! Every product accumulates each output cell as one sequential sum over the
//! shared dimension (in index order), so results never depend on blocking or
//! thread count.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from equally long rows. Panics on ragged input; meant
    /// for literals and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A `1 x len` matrix.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// I.i.d. draws from `[lo, hi)`.
    pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain(alloc::format!(
                "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
            )));
        }
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(shape_err("reshape", self.shape(), (rows, cols)));
        }
        Ok(Self {
            rows,
            cols,
            data: self.data,
        })
    }

    /// Copies the contiguous columns `start..start + width`.
    pub fn columns(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(shape_err("columns", self.shape(), (start, width)));
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Self {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Copies the given rows, in order (repeats allowed).
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(shape_err("matmul", self.shape(), b.shape()));
        }
        let (n, inner, m) = (self.rows, self.cols, b.cols);
        let out = gemm(n, m, inner, &self.data, inner, 1, &b.data);
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · bᵀ`.
    pub fn matmul_bt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(shape_err("matmul_bt", self.shape(), b.shape()));
        }
        self.matmul(&b.transpose())
    }

    /// `selfᵀ · b`.
    pub fn matmul_at(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(shape_err("matmul_at", self.shape(), b.shape()));
        }
        let (n, m) = (self.cols, b.cols);
        let out = gemm(n, m, self.rows, &self.data, 1, n, &b.data);
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn hadamard(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", b, |x, y| x * y)
    }

    /// Elementwise sum. A `1 x cols` right-hand side is repeated across
    /// every row of `self`.
    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows == 1 && b.cols == self.cols && self.rows != 1 {
            let mut out = self.clone();
            out.add_row_in_place(b)?;
            return Ok(out);
        }
        self.zip_with("add", b, |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", b, |x, y| x - y)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row_in_place(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(shape_err("add_row", self.shape(), bias.shape()));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, &b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Multiplies every row elementwise by a `1 x cols` row.
    pub fn mul_row(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(shape_err("mul_row", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for r in out.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, &k) in r.iter_mut().zip(&row.data) {
                *x *= k;
            }
        }
        Ok(out)
    }

    /// `self += alpha * b`.
    pub fn axpy(&mut self, alpha: f64, b: &Matrix) -> Result<()> {
        if self.shape() != b.shape() {
            return Err(shape_err("axpy", self.shape(), b.shape()));
        }
        for (x, &y) in self.data.iter_mut().zip(&b.data) {
            *x += alpha * y;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn map_sin(&self) -> Matrix {
        self.map(libm::sin)
    }

    pub fn map_cos(&self) -> Matrix {
        self.map(libm::cos)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Matrix::row_vector(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn zip_with(&self, op: &'static str, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != b.shape() {
            return Err(shape_err(op, self.shape(), b.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }
}

/// SplitMix64 stream with the float, bounded-integer and sampling helpers
/// the rest of the crate uses. Every derived value is defined here on top of
/// raw 64-bit words, so draws reproduce on every platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    inner: SplitMix64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`; caller guarantees `lo < hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        loop {
            let v = lo + (hi - lo) * self.next_f64();
            // rounding can land exactly on `hi`
            if v < hi {
                return v;
            }
        }
    }

    /// Unbiased integer in `0..bound` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "empty range");
        let bound = bound as u64;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Derives an independent stream, e.g. one per band or per purpose.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    /// `count` distinct indices from `0..n` (partial Fisher-Yates); when
    /// `count > n`, falls back to `count` independent draws with replacement.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        if count > n {
            return (0..count).map(|_| self.below(n)).collect();
        }
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    }
}

/// `n x m` product of `a` (addressed as `a[i * row_stride + k * k_stride]`)
/// with row-major `b` (`depth x m`). Every output entry is accumulated from
/// 0.0 over `k` in ascending order, so the result is bitwise identical to a
/// naive triple loop; the tiling only keeps partial sums in registers.
fn gemm(n: usize, m: usize, depth: usize, a: &[f64], row_stride: usize, k_stride: usize, b: &[f64]) -> Vec<f64> {
    const R: usize = 4;
    const C: usize = 8;
    let mut out = vec![0.0; n * m];
    let mut i = 0;
    while i < n {
        let rows = R.min(n - i);
        let mut j = 0;
        while j < m {
            let cols = if rows == R { C.min(m - j) } else { m - j };
            if rows == R && cols == C {
                let mut acc = [[0.0f64; C]; R];
                for k in 0..depth {
                    let b_row: &[f64; C] = b[k * m + j..k * m + j + C].try_into().unwrap();
                    for (r, acc_row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * row_stride + k * k_stride];
                        for (o, &bv) in acc_row.iter_mut().zip(b_row) {
                            *o += av * bv;
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    out[(i + r) * m + j..(i + r) * m + j + C].copy_from_slice(acc_row);
                }
            } else {
                for r in i..i + rows {
                    let out_row = &mut out[r * m + j..r * m + j + cols];
                    for k in 0..depth {
                        let av = a[r * row_stride + k * k_stride];
                        for (o, &bv) in out_row.iter_mut().zip(&b[k * m + j..k * m + j + cols]) {
                            *o += av * bv;
                        }
                    }
                }
            }
            j += cols;
        }
        i += rows;
    }
    out
}
