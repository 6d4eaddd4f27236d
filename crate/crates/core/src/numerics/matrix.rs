use std::fmt;

use crate::error::{dim_err, Result};

/// Dense row-major matrix of `f64`.
///
/// Vectors are represented as matrices with a single row, and batches of
/// vectors as one row per batch element. All weight matrices in this crate
/// are stored input-major (`in_dim x out_dim`) so that a batch of row vectors
/// maps through a layer as `x * W`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.iter().take(16)).finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            );
        }
        Ok(Self { rows, cols, data })
    }

    /// Single-row matrix holding `values`.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self { rows: 1, cols: values.len(), data: values }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Checked matrix product `self * b`.
    pub fn gemm(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return dim_err(
                "gemm",
                format!("{}x{} times {}x{}", self.rows, self.cols, b.rows, b.cols),
            );
        }
        let mut c = Matrix::zeros(self.rows, b.cols);
        matmul_acc(&mut c, self, b);
        Ok(c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert!(self.same_shape(other), "zip_map shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn hadamard_inplace(&mut self, other: &Matrix) {
        assert!(self.same_shape(other), "hadamard shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert!(self.same_shape(other), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Adds the single-row `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix) {
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, self.cols);
        for r in 0..self.rows {
            for (a, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
    }

    /// Accumulates the column sums of `self` into the single-row `acc`.
    pub fn col_sum_into(&self, acc: &mut Matrix) {
        assert_eq!(acc.rows, 1);
        assert_eq!(acc.cols, self.cols);
        for r in 0..self.rows {
            for (a, &v) in acc.data.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Gathers the given rows into a new matrix.
    pub fn gather_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// `c += A * b` where `A(i, k) = a[i * ai + k * ak]`.
///
/// Outputs are computed in register tiles, but every entry still adds its
/// products in increasing `k`, so results are bitwise those of the naive loop.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(c: &mut [f64], n: usize, rows: usize, a: &[f64], ai: usize, ak: usize, b: &[f64], kdim: usize) {
    let row_end = rows / TILE_ROWS * TILE_ROWS;
    let col_end = n / TILE_COLS * TILE_COLS;
    for i0 in (0..row_end).step_by(TILE_ROWS) {
        for j0 in (0..col_end).step_by(TILE_COLS) {
            let mut acc = [[0.0; TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS]);
            }
            for k in 0..kdim {
                let brow: &[f64; TILE_COLS] = b[k * n + j0..k * n + j0 + TILE_COLS].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * ai + k * ak];
                    for (x, &bv) in row.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS].copy_from_slice(row);
            }
        }
    }
    let edge = |c: &mut [f64], i: usize, j0: usize| {
        let crow = &mut c[i * n + j0..(i + 1) * n];
        for k in 0..kdim {
            let av = a[i * ai + k * ak];
            for (x, &bv) in crow.iter_mut().zip(&b[k * n + j0..(k + 1) * n]) {
                *x += av * bv;
            }
        }
    };
    if col_end < n {
        for i in 0..row_end {
            edge(c, i, col_end);
        }
    }
    for i in row_end..rows {
        edge(c, i, 0);
    }
}

/// `c += a * b`.
pub fn matmul_acc(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    assert_eq!(c.rows, a.rows, "matmul output rows");
    assert_eq!(c.cols, b.cols, "matmul output cols");
    gemm_strided(&mut c.data, b.cols, a.rows, &a.data, a.cols, 1, &b.data, a.cols);
}

/// `c += a^T * b`.
pub fn matmul_tn_acc(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
    assert_eq!(c.rows, a.cols, "matmul_tn output rows");
    assert_eq!(c.cols, b.cols, "matmul_tn output cols");
    gemm_strided(&mut c.data, b.cols, a.cols, &a.data, 1, a.cols, &b.data, a.rows);
}

/// `c += a * b^T`.
pub fn matmul_nt_acc(c: &mut Matrix, a: &Matrix, b: &Matrix) {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    let bt = b.transpose();
    matmul_acc(c, a, &bt);
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.cols);
    matmul_acc(&mut c, a, b);
    c
}

pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows, b.rows);
    matmul_nt_acc(&mut c, a, b);
    c
}

pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.cols, b.cols);
    matmul_tn_acc(&mut c, a, b);
    c
}
