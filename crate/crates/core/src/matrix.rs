//! Dense row-major matrices and the arithmetic used by the training code.
//!
//! Matrices are batch-major: rows are examples, columns are feature or unit
//! indices. All math is f64. Once returned from an operation a matrix is
//! never mutated by this crate, so sharing read-only references across
//! threads is safe.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Dense row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data; the length must be rows*cols.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Data(format!(
                    "row {i} has length {} but row 0 has length {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies rows `range.start..range.end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        debug_assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
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

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// a * b, shapes (n x k) * (k x m) -> (n x m).
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.debug_check_finite("matmul");
        Ok(out)
    }

    /// self^T * other, shapes (n x a)^T * (n x b) -> (a x b).
    /// Used for weight gradients without materializing transposes.
    pub fn matmul_transpose_self(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_transpose_self",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, a, b) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(a, b);
        for i in 0..n {
            let x_row = &self.data[i * a..(i + 1) * a];
            let y_row = &other.data[i * b..(i + 1) * b];
            for (p, &x) in x_row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[p * b..(p + 1) * b];
                for (o, &y) in o_row.iter_mut().zip(y_row) {
                    *o += x * y;
                }
            }
        }
        Ok(out)
    }

    /// self * other^T, shapes (n x a) * (b x a)^T -> (n x b).
    pub fn matmul_transpose_other(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_transpose_other",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, a, b) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(n, b);
        for i in 0..n {
            let x_row = &self.data[i * a..(i + 1) * a];
            let o_row = &mut out.data[i * b..(i + 1) * b];
            for (p, o) in o_row.iter_mut().enumerate() {
                let w_row = &other.data[p * a..(p + 1) * a];
                let mut acc = 0.0;
                for (&x, &w) in x_row.iter().zip(w_row) {
                    acc += x * w;
                }
                *o = acc;
            }
        }
        Ok(out)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "hadamard",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|x| x * factor)
    }

    /// self += other * factor.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * factor;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Column sums, i.e. a vector of length `cols`.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// input * weights + bias broadcast over rows.
    ///
    /// input is (n x d), weights (d x h), bias has length h.
    pub fn affine(&self, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
        if self.cols != weights.rows {
            return Err(Error::ShapeMismatch {
                op: "affine",
                left: self.shape(),
                right: weights.shape(),
            });
        }
        if bias.len() != weights.cols {
            return Err(Error::ShapeMismatch {
                op: "affine bias",
                left: (1, bias.len()),
                right: weights.shape(),
            });
        }
        let mut out = self.matmul(weights)?;
        for i in 0..out.rows {
            let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
            for (o, &b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        out.debug_check_finite("affine");
        Ok(out)
    }

    /// Row-wise softmax with per-row max subtraction for overflow safety.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out.debug_check_finite("softmax_rows");
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    #[inline]
    fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.is_finite(), "{op}: non-finite value produced");
        let _ = op;
    }
}

/// Draws an independent Bernoulli 0/1 entry for every probability in
/// `probs`, row-major order. Probabilities must lie in [0, 1].
pub fn sample_bernoulli(rng: &mut SeededRng, probs: &Matrix) -> Result<Matrix> {
    for &p in probs.as_slice() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "bernoulli probability {p} outside [0, 1]"
            )));
        }
    }
    let data = probs
        .as_slice()
        .iter()
        .map(|&p| if rng.next_f64() < p { 1.0 } else { 0.0 })
        .collect();
    Matrix::from_vec(probs.rows(), probs.cols(), data)
}

/// Elementwise Gaussian draws centered on `mean` with shared `stddev`.
///
/// A standard deviation of exactly zero returns the mean unchanged and
/// consumes no randomness.
pub fn sample_gaussian(rng: &mut SeededRng, mean: &Matrix, stddev: f64) -> Result<Matrix> {
    if stddev < 0.0 || !stddev.is_finite() {
        return Err(Error::Domain(format!("negative stddev {stddev}")));
    }
    if stddev == 0.0 {
        return Ok(mean.clone());
    }
    let data = mean
        .as_slice()
        .iter()
        .map(|&m| m + stddev * rng.next_normal())
        .collect();
    Matrix::from_vec(mean.rows(), mean.cols(), data)
}
