//! Dense row-major matrix, just enough for per-frame score tables and layer
//! weights.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, F::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[F]> {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: F) -> Self {
        self.map(|v| v * factor)
    }

    /// Elementwise `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Self, factor: F) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in add_scaled");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row_sums(&self) -> Vec<F> {
        self.iter_rows().map(|r| r.iter().copied().sum()).collect()
    }

    pub fn convert<G: Real>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

impl<F> Index<(usize, usize)> for Matrix<F> {
    type Output = F;

    fn index(&self, (r, c): (usize, usize)) -> &F {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<F> IndexMut<(usize, usize)> for Matrix<F> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut F {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Numerically stable `log(exp(a) + exp(b))`; negative infinity is the
/// additive identity.
pub fn log_add<F: Real>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log Σ exp(x)` with max subtraction. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp<F: Real>(values: &[F]) -> F {
    let max = values.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let sum: F = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(scores: &Matrix<F>) -> Matrix<F> {
    let mut out = scores.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
