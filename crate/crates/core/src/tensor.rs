//! Dense row-major containers used throughout the crate.
//!
//! Two shapes appear everywhere: plain `rows × cols` matrices (hidden states,
//! weights, logits) and per-head row blocks `heads × rows × dim` (query, key,
//! value and partial attention tensors).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f64>]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// `self (n×k) · rhs (k×m)`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self (n×k) · rhsᵀ` where `rhs` is `m×k`.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_transposed inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            for c in 0..rhs.rows {
                out.data[r * rhs.rows + c] = dot(self.row(r), rhs.row(c));
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-head row block of shape `heads × rows × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRows {
    heads: usize,
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl HeadRows {
    pub fn zeros(heads: usize, rows: usize, dim: usize) -> Self {
        Self { heads, rows, dim, data: vec![0.0; heads * rows * dim] }
    }

    pub fn from_vec(heads: usize, rows: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), heads * rows * dim, "head tensor data length");
        Self { heads, rows, dim, data }
    }

    /// Splits each row of `m` (width `heads * dim`) into per-head vectors.
    pub fn from_matrix(m: &Matrix, heads: usize, dim: usize) -> Self {
        assert_eq!(m.cols(), heads * dim, "head split width");
        let mut out = Self::zeros(heads, m.rows(), dim);
        for r in 0..m.rows() {
            let row = m.row(r);
            for h in 0..heads {
                out.get_mut(h, r).copy_from_slice(&row[h * dim..(h + 1) * dim]);
            }
        }
        out
    }

    /// Inverse of [`HeadRows::from_matrix`].
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.heads * self.dim);
        for r in 0..self.rows {
            let row = m.row_mut(r);
            for h in 0..self.heads {
                row[h * self.dim..(h + 1) * self.dim].copy_from_slice(self.get(h, r));
            }
        }
        m
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, head: usize, row: usize) -> &[f64] {
        let start = (head * self.rows + row) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn get_mut(&mut self, head: usize, row: usize) -> &mut [f64] {
        let start = (head * self.rows + row) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn select_rows(&self, rows: &[usize]) -> HeadRows {
        let mut out = HeadRows::zeros(self.heads, rows.len(), self.dim);
        for h in 0..self.heads {
            for (dst, &src) in rows.iter().enumerate() {
                out.get_mut(h, dst).copy_from_slice(self.get(h, src));
            }
        }
        out
    }

    /// Stacks blocks along the row axis. All blocks must agree on heads and dim.
    pub fn concat_rows(heads: usize, dim: usize, blocks: &[&HeadRows]) -> HeadRows {
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut out = HeadRows::zeros(heads, rows, dim);
        for h in 0..heads {
            let mut r = 0;
            for b in blocks {
                assert_eq!((b.heads, b.dim), (heads, dim), "concat shape");
                for br in 0..b.rows {
                    out.get_mut(h, r).copy_from_slice(b.get(h, br));
                    r += 1;
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normwise relative error `max|a-b| / max|b|` over all entries.
///
/// Falls back to the absolute error when the reference is identically zero.
pub fn max_relative_error(actual: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "length mismatch");
    let scale = reference.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = actual.iter().zip(reference).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
