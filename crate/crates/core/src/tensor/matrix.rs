use std::fmt;

use crate::error::{dim_err, invalid, PqmError, Result};
use crate::tensor::Rng;

/// Row-major dense matrix of `f32` values.
///
/// Products accumulate in `f64` with a fixed loop order, so results are
/// reproducible bit for bit across runs.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(dim_err!("matrix must be non-empty, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return Err(dim_err!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("matrix data contains NaN or Inf"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep every element finite.
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        finite(self.rows, self.cols, data)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        finite(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f32) -> Result<Matrix> {
        finite(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    /// Elementwise `self += rhs`.
    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f32 {
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    fn check_same_shape(&self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(dim_err!(
                "shape {:?} does not match {:?}",
                self.shape(),
                rhs.shape()
            ));
        }
        Ok(())
    }
}

fn finite(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(PqmError::InvalidArgument(
            "operation produced a non-finite value".into(),
        ));
    }
    Ok(Matrix { rows, cols, data })
}

/// Standard matrix product `a · b`.
///
/// Each output row is accumulated in an `f64` buffer, iterating the inner
/// dimension in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(dim_err!(
            "cannot multiply {}x{} by {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let (m, n, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * p];
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let a_row = &a.data[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = f64::from(aik);
            let b_row = &b.data[k * p..(k + 1) * p];
            for (acc_j, &bkj) in acc.iter_mut().zip(b_row) {
                *acc_j += aik * f64::from(bkj);
            }
        }
        for (o, &v) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    finite(m, p, out)
}

/// Fills `m` with i.i.d. `N(mean, std²)` draws taken from `rng` via Box–Muller,
/// in row-major order.
pub fn gaussian_fill(mut m: Matrix, mean: f32, std: f32, rng: &mut Rng) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(invalid!("gaussian_fill needs finite mean and std >= 0, got std={std}"));
    }
    let (mean, std) = (f64::from(mean), f64::from(std));
    for v in m.data.iter_mut() {
        *v = (mean + std * rng.normal()) as f32;
    }
    Ok(m)
}
