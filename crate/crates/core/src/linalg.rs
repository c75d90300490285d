//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate needs.
//!
//! Samples are rows everywhere: a mini-batch is a contiguous block of rows and
//! a layer weight is stored `out_dim x in_dim`, so a layer forward pass is
//! `X * W^T`.

use std::fmt;

use crate::error::{Error, Result};

/// Rows per parallel work item in the matrix products. Fixed (rather than
/// derived from the thread count) so results do not depend on the pool size.
const PAR_ROW_CHUNK: usize = 64;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()
        } else {
            f.write_str("[..]")
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, and a 0-column matrix still has rows
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, what: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f64;
            means.iter_mut().for_each(|m| *m *= inv);
        }
        means
    }

    /// Keeps only the first `n` columns.
    pub fn leading_columns(&self, n: usize) -> Matrix {
        let n = n.min(self.cols);
        Matrix::from_fn(self.rows, n, |i, j| self.get(i, j))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Plain,
    Transposed,
}

/// Sizes and strides describing one operand as seen by the product.
#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Operand<'a> {
    fn of(m: &'a Matrix, layout: Layout) -> Self {
        match layout {
            Layout::Plain => Operand {
                data: &m.data,
                rs: m.cols as isize,
                cs: 1,
            },
            Layout::Transposed => Operand {
                data: &m.data,
                rs: 1,
                cs: m.cols as isize,
            },
        }
    }
}

/// `c[rows, n] = a[rows, k] * b[k, n]` for a block of output rows starting at
/// `row0` of `a`.
fn gemm_block(a: Operand<'_>, b: Operand<'_>, k: usize, n: usize, row0: usize, c: &mut [f64]) {
    let rows = c.len() / n.max(1);
    if rows == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let offset = row0 as isize * a.rs;
    // SAFETY: all strides and extents were derived from the operands' shapes;
    // the callers validated that a is rows x k and b is k x n under the chosen
    // layouts, and c holds exactly rows x n elements.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a.data.as_ptr().offset(offset),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn product(
    a: &Matrix,
    la: Layout,
    b: &Matrix,
    lb: Layout,
    parallel: bool,
    op: &'static str,
) -> Result<Matrix> {
    let (m, k) = match la {
        Layout::Plain => (a.rows, a.cols),
        Layout::Transposed => (a.cols, a.rows),
    };
    let (kb, n) = match lb {
        Layout::Plain => (b.rows, b.cols),
        Layout::Transposed => (b.cols, b.rows),
    };
    if k != kb {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    let ao = Operand::of(a, la);
    let bo = Operand::of(b, lb);
    let mut out = Matrix::zeros(m, n);
    if n > 0 {
        run_blocks(&mut out.data, n, parallel && m > PAR_ROW_CHUNK, |row0, c| {
            gemm_block(ao, bo, k, n, row0, c)
        });
    }
    out.ensure_finite(op)
}

#[cfg(feature = "parallel")]
fn run_blocks<F>(out: &mut [f64], n: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    if parallel {
        out.par_chunks_mut(PAR_ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, c)| f(i * PAR_ROW_CHUNK, c));
    } else {
        f(0, out);
    }
}

#[cfg(not(feature = "parallel"))]
fn run_blocks<F>(out: &mut [f64], _n: usize, _parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    f(0, out);
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Layout::Plain, b, Layout::Plain, true, "matmul")
}

/// `a * b` on the calling thread only.
pub fn matmul_sequential(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Layout::Plain, b, Layout::Plain, false, "matmul")
}

/// `a * b^T`, without materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Layout::Plain, b, Layout::Transposed, true, "matmul_bt")
}

/// `a^T * b`, without materializing the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Layout::Transposed, b, Layout::Plain, true, "matmul_at")
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distance from every row of `h` to `m_row`.
pub fn rowwise_sqnorm_diff(h: &Matrix, m_row: &[f64]) -> Result<Vec<f64>> {
    if h.cols != m_row.len() {
        return Err(Error::Shape {
            op: "rowwise_sqnorm_diff",
            left: h.shape(),
            right: (1, m_row.len()),
        });
    }
    Ok(h.row_iter().map(|r| sq_dist(r, m_row)).collect())
}
