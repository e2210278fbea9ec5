//! Dense row-major matrices and vectors in 64-bit floating point.
//!
//! Everything downstream (weights, masks, calibration batches, scores) is a
//! [`Matrix`]; per-channel quantities (scales, shifts, Hessian diagonals) are
//! [`Vector`]s. Constructors reject non-finite entries so the finiteness
//! invariant holds for every value built through the public API.

use std::cell::Cell;
use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

thread_local! {
    static MATMULS: Cell<u64> = const { Cell::new(0) };
    static DENSE_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread operation counters used to check the structural cost of code paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    /// Matrix-matrix products.
    pub matmuls: u64,
    /// Full passes over a matrix (rows x cols work), excluding products.
    pub dense_passes: u64,
}

impl OpCounts {
    pub fn snapshot() -> Self {
        OpCounts {
            matmuls: MATMULS.with(Cell::get),
            dense_passes: DENSE_PASSES.with(Cell::get),
        }
    }

    pub fn since(self, earlier: OpCounts) -> OpCounts {
        OpCounts {
            matmuls: self.matmuls - earlier.matmuls,
            dense_passes: self.dense_passes - earlier.dense_passes,
        }
    }
}

fn note_matmul() {
    MATMULS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn note_pass() {
    DENSE_PASSES.with(|c| c.set(c.get() + 1));
}

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols))
                .finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Domain(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Domain(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "Matrix::new")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Domain("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Matrix::new(rows.len(), cols, data)
    }

    /// Panics on a zero dimension; `f` must return finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Matrix { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix::from_fn(rows, cols, |_, _| value)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Standard product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        note_matmul();
        let (n, m) = (self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        note_pass();
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        note_pass();
        let m = Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        debug_assert!(m.data.iter().all(|v| v.is_finite()));
        m
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn abs(&self) -> Matrix {
        self.map(f64::abs)
    }

    /// Multiplies column `j` by `factors[j]` (right-multiplication by a diagonal).
    pub fn scale_cols(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.cols {
            return Err(Error::Shape {
                op: "scale_cols",
                left: self.shape(),
                right: (factors.len(), 1),
            });
        }
        note_pass();
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        check_finite(&out.data, "scale_cols")?;
        Ok(out)
    }

    /// Multiplies row `i` by `factors[i]` (left-multiplication by a diagonal).
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.rows {
            return Err(Error::Shape {
                op: "scale_rows",
                left: self.shape(),
                right: (factors.len(), 1),
            });
        }
        note_pass();
        let mut out = self.clone();
        for (row, f) in out.data.chunks_mut(self.cols).zip(factors) {
            for v in row.iter_mut() {
                *v *= f;
            }
        }
        check_finite(&out.data, "scale_rows")?;
        Ok(out)
    }

    /// Subtracts `offsets[i]` from every entry of row `i`.
    pub fn shift_rows(&self, offsets: &[f64]) -> Result<Matrix> {
        if offsets.len() != self.rows {
            return Err(Error::Shape {
                op: "shift_rows",
                left: self.shape(),
                right: (offsets.len(), 1),
            });
        }
        note_pass();
        let mut out = self.clone();
        for (row, d) in out.data.chunks_mut(self.cols).zip(offsets) {
            for v in row.iter_mut() {
                *v -= d;
            }
        }
        check_finite(&out.data, "shift_rows")?;
        Ok(out)
    }

    /// Matrix-vector product `self * v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                op: "mul_vec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let out: Vec<f64> = (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect();
        check_finite(&out, "mul_vec")?;
        Ok(Vector(out))
    }

    /// Adds `v[i]` to every entry of row `i`.
    pub fn add_col_vector(&self, v: &[f64]) -> Result<Matrix> {
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        self.shift_rows(&neg)
    }

    pub fn columns(&self, range: std::ops::Range<usize>) -> Result<Matrix> {
        if range.is_empty() || range.end > self.cols {
            return Err(Error::Domain(format!(
                "column range {range:?} invalid for {} columns",
                self.cols
            )));
        }
        let width = range.len();
        Ok(Matrix::from_fn(self.rows, width, |i, j| self.get(i, range.start + j)))
    }

    /// Stacks `blocks` vertically; all must share a column count.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Domain("vstack of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != first.cols {
                return Err(Error::Shape {
                    op: "vstack",
                    left: first.shape(),
                    right: b.shape(),
                });
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Matrix::new(rows, first.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        scaled_norm(&self.data, 2.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Entrywise p-norm `(sum |w_ij|^p)^(1/p)` for `p >= 1`.
    pub fn entrywise_p_norm(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::Domain(format!("norm order must be finite and >= 1, got {p}")));
        }
        Ok(scaled_norm(&self.data, p))
    }

    /// Euclidean norm of every column.
    pub fn col_l2_norms(&self) -> Vector {
        let mut acc = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v * v;
            }
        }
        Vector(acc.into_iter().map(f64::sqrt).collect())
    }

    /// Per-row median and mean over the columns (samples).
    ///
    /// The median of an even number of samples is the mean of the two
    /// central order statistics.
    pub fn row_stats(&self) -> (Vector, Vector) {
        let mut medians = Vec::with_capacity(self.rows);
        let mut means = Vec::with_capacity(self.rows);
        let mut buf = Vec::with_capacity(self.cols);
        for row in self.data.chunks(self.cols) {
            buf.clear();
            buf.extend_from_slice(row);
            buf.sort_by(f64::total_cmp);
            let n = buf.len();
            let median = if n % 2 == 1 {
                buf[n / 2]
            } else {
                0.5 * (buf[n / 2 - 1] + buf[n / 2])
            };
            medians.push(median);
            means.push(row.iter().sum::<f64>() / n as f64);
        }
        (Vector(medians), Vector(means))
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// p-norm computed relative to the largest magnitude so that huge or tiny
/// entries neither overflow nor underflow.
fn scaled_norm(data: &[f64], p: f64) -> f64 {
    let peak = data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    let sum: f64 = if p == 2.0 {
        data.iter().map(|v| (v / peak) * (v / peak)).sum()
    } else if p == 1.0 {
        data.iter().map(|v| v.abs() / peak).sum()
    } else {
        data.iter().map(|v| (v.abs() / peak).powf(p)).sum()
    };
    peak * sum.powf(1.0 / p)
}

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(pub(crate) Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data, "Vector::new")?;
        Ok(Vector(data))
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn zeros(len: usize) -> Self {
        Vector::filled(len, 0.0)
    }

    pub fn ones(len: usize) -> Self {
        Vector::filled(len, 1.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_all(&self, value: f64) -> bool {
        self.0.iter().all(|&v| v == value)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        debug_assert!(v.iter().all(|x| x.is_finite()));
        Vector(v)
    }
}

/// Largest entrywise discrepancy relative to the largest reference magnitude.
///
/// Returns the absolute discrepancy when the reference is identically zero.
pub fn max_relative_discrepancy(reference: &Matrix, other: &Matrix) -> Result<f64> {
    let diff = reference.sub(other)?;
    let scale = reference.max_abs();
    let err = diff.max_abs();
    Ok(if scale > 0.0 { err / scale } else { err })
}
