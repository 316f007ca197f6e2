//! Dense row-major f64 matrix.
//!
//! Every matrix in this crate is small (dimensions up to a few hundred), so
//! storage is a single `Vec<f64>` with no blocking or sparsity. Entries are
//! finite by construction: fallible constructors and the operations that can
//! overflow reject NaN/Inf instead of propagating it.

use crate::error::{DcaError, Result};

/// Dense matrix, row-major, 64-bit entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build from row-major data. Rejects empty dimensions, length mismatch
    /// and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(DcaError::InvalidParameter(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(DcaError::InvalidParameter(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(DcaError::NonFinite("matrix construction"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build entrywise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(DcaError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out.check_finite("matmul")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        let out = self.map(|x| x * factor);
        out.check_finite("scale")?;
        Ok(out)
    }

    pub fn tanh(&self) -> Matrix {
        self.map(f64::tanh)
    }

    pub fn relu(&self) -> Matrix {
        self.map(|x| x.max(0.0))
    }

    /// Entrywise map; the caller is responsible for keeping values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Column-wise softmax with temperature: out[i][j] =
    /// exp(m[i][j]/T) / sum_k exp(m[k][j]/T), stabilized by subtracting the
    /// per-column maximum before exponentiation.
    pub fn softmax_cols(&self, temperature: f64) -> Result<Matrix> {
        if !(temperature > 0.0) {
            return Err(DcaError::InvalidParameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let mut out = Matrix::zeros(self.rows, self.cols);
        for j in 0..self.cols {
            let mut max = f64::NEG_INFINITY;
            for i in 0..self.rows {
                max = max.max(self.get(i, j) / temperature);
            }
            let mut sum = 0.0;
            for i in 0..self.rows {
                let e = (self.get(i, j) / temperature - max).exp();
                out.data[i * self.cols + j] = e;
                sum += e;
            }
            for i in 0..self.rows {
                out.data[i * self.cols + j] /= sum;
            }
        }
        Ok(out)
    }

    /// Largest absolute entry difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-exact equality of shape and entries.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(DcaError::NonFinite(op))
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(DcaError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        out.check_finite(op)?;
        Ok(out)
    }
}
