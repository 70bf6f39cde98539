// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices and the linear solves used by the edit engine.
//!
//! Model tensors use `Matrix<f32>`; every solver path works on `Matrix<f64>`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Relative asymmetry tolerated by [`solve_spd`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
/// Ridge used when Cholesky fails: `RIDGE_SCALE * trace(A) / dim(A)`.
pub const RIDGE_SCALE: f64 = 1e-6;
/// Gram eigenvalues below this fraction of the largest are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("matrix is singular and could not be regularized")]
    Singular,
    #[error("empty matrix in {0}")]
    Empty(&'static str),
}

/// Element type of a [`Matrix`].
pub trait Scalar:
    Copy + Default + PartialEq + fmt::Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + AddAssign
{
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", &self.row(r)[..self.cols.min(6)])?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::from_f64(1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<T>]) -> Result<Self, NumericsError> {
        let rows = cols.first().map_or(0, |c| c.len());
        let mut m = Self::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            if c.len() != rows {
                return Err(NumericsError::DimensionMismatch {
                    op: "from_columns",
                    left: (rows, cols.len()),
                    right: (c.len(), 1),
                });
            }
            for (i, &v) in c.iter().enumerate() {
                m.data[i * m.cols + j] = v;
            }
        }
        Ok(m)
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, NumericsError> {
        if self.cols != rhs.rows {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, rhs: &Self) -> Result<Self, NumericsError> {
        if self.cols != rhs.cols {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            for j in 0..rhs.rows {
                let mut acc = T::default();
                for (&a, &b) in self.row(i).iter().zip(rhs.row(j)) {
                    acc += a * b;
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>, NumericsError> {
        if self.cols != x.len() {
            return Err(NumericsError::DimensionMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows)
            .map(|r| {
                let mut acc = T::default();
                for (&a, &b) in self.row(r).iter().zip(x) {
                    acc += a * b;
                }
                acc
            })
            .collect())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, NumericsError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, NumericsError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, NumericsError> {
        if self.shape() != rhs.shape() {
            return Err(NumericsError::DimensionMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum())
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Per-column mean plus one scalar standard deviation over every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Population statistics of a matrix's entries.
pub fn column_stats<T: Scalar>(m: &Matrix<T>) -> Result<ColumnStats, NumericsError> {
    if m.data.is_empty() {
        return Err(NumericsError::Empty("column_stats"));
    }
    let mut mean = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v.to_f64();
        }
    }
    for v in &mut mean {
        *v /= m.rows as f64;
    }
    let n = m.data.len() as f64;
    let grand = m.data.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = m
        .data
        .iter()
        .map(|v| {
            let d = v.to_f64() - grand;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(ColumnStats {
        mean,
        std: libm::sqrt(var),
    })
}

/// Result of [`solve_spd`]; `ridge` is set when the system had to be regularized.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdSolution {
    pub x: Matrix<f64>,
    pub ridge: Option<f64>,
}

fn check_square_symmetric(a: &Matrix<f64>) -> Result<(), NumericsError> {
    if a.rows != a.cols {
        return Err(NumericsError::DimensionMismatch {
            op: "square",
            left: a.shape(),
            right: (a.cols, a.rows),
        });
    }
    if !a.is_finite() {
        return Err(NumericsError::NonFinite("solver input"));
    }
    let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0f64;
    for i in 0..a.rows {
        for j in (i + 1)..a.cols {
            asym = asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    let rel = if scale > 0.0 { asym / scale } else { 0.0 };
    if rel > SYMMETRY_TOLERANCE {
        return Err(NumericsError::NotSymmetric(rel));
    }
    Ok(())
}

/// Lower Cholesky factor, or `None` when a pivot is not safely positive.
fn cholesky(a: &Matrix<f64>) -> Option<Matrix<f64>> {
    let n = a.rows;
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a.get(i, i).abs()));
    let floor = f64::EPSILON * n as f64 * max_diag;
    let mut l = Matrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > floor) {
            return None;
        }
        let d = libm::sqrt(d);
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    let n = l.rows;
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Solves `A X = B` for symmetric positive (semi)definite `A`.
///
/// Falls back to `(A + λI) X = B` with `λ = RIDGE_SCALE * trace(A) / n` when the
/// Cholesky factorization breaks down, and reports `λ` in the result.
pub fn solve_spd(a: &Matrix<f64>, b: &Matrix<f64>) -> Result<SpdSolution, NumericsError> {
    check_square_symmetric(a)?;
    if b.rows != a.rows {
        return Err(NumericsError::DimensionMismatch {
            op: "solve_spd",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if !b.is_finite() {
        return Err(NumericsError::NonFinite("solver rhs"));
    }
    if a.rows == 0 {
        return Ok(SpdSolution {
            x: b.clone(),
            ridge: None,
        });
    }
    if let Some(l) = cholesky(a) {
        return Ok(SpdSolution {
            x: cholesky_solve(&l, b),
            ridge: None,
        });
    }
    let n = a.rows;
    let trace: f64 = (0..n).map(|i| a.get(i, i)).sum();
    let lambda = RIDGE_SCALE * trace / n as f64;
    if !(lambda > 0.0) {
        return Err(NumericsError::Singular);
    }
    let mut reg = a.clone();
    for i in 0..n {
        reg.set(i, i, reg.get(i, i) + lambda);
    }
    let l = cholesky(&reg).ok_or(NumericsError::Singular)?;
    Ok(SpdSolution {
        x: cholesky_solve(&l, b),
        ridge: Some(lambda),
    })
}

/// Eigenvalues (ascending) and matching eigenvectors (as columns) of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix<f64>,
}

/// Cyclic Jacobi eigendecomposition.
pub fn symmetric_eigen(a: &Matrix<f64>) -> Result<SymmetricEigen, NumericsError> {
    check_square_symmetric(a)?;
    let n = a.rows;
    let mut m = a.clone();
    // symmetrize exactly so rotations stay consistent
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let mut v = Matrix::<f64>::identity(n);
    let total: f64 = m.data.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Pseudoinverse of a symmetric PSD matrix; eigenvalues at or below
/// `PINV_CUTOFF` times the largest are treated as zero.
pub fn symmetric_pinv(a: &Matrix<f64>) -> Result<Matrix<f64>, NumericsError> {
    let eig = symmetric_eigen(a)?;
    let largest = eig.values.iter().fold(0.0f64, |m, v| m.max(*v));
    let n = a.rows;
    let mut out = Matrix::<f64>::zeros(n, n);
    if largest > 0.0 {
        for (idx, &lambda) in eig.values.iter().enumerate() {
            if lambda <= PINV_CUTOFF * largest {
                continue;
            }
            let inv = 1.0 / lambda;
            for i in 0..n {
                let vi = eig.vectors.get(i, idx) * inv;
                for j in 0..n {
                    let cur = out.get(i, j);
                    out.set(i, j, cur + vi * eig.vectors.get(j, idx));
                }
            }
        }
    }
    Ok(out)
}

/// Moore–Penrose pseudoinverse via eigendecomposition of the smaller Gram matrix.
pub fn pseudoinverse(k: &Matrix<f64>) -> Result<Matrix<f64>, NumericsError> {
    if k.data.is_empty() {
        return Err(NumericsError::Empty("pseudoinverse"));
    }
    if !k.is_finite() {
        return Err(NumericsError::NonFinite("pseudoinverse input"));
    }
    let tall = k.rows >= k.cols;
    // tall: K⁺ = (KᵀK)⁺ Kᵀ ; wide: K⁺ = Kᵀ (KKᵀ)⁺
    let gram = if tall {
        k.transpose().matmul(k)?
    } else {
        k.matmul_transposed(k)?
    };
    let gram_pinv = symmetric_pinv(&gram)?;
    if tall {
        gram_pinv.matmul(&k.transpose())
    } else {
        k.transpose().matmul(&gram_pinv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.sub(b).unwrap().data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 3, 2);
        let sol = solve_spd(&Matrix::identity(3), &b).unwrap();
        assert_eq!(sol.x, b);
        assert!(sol.ridge.is_none());
    }

    #[test]
    fn diagonal_solve() {
        let a = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[2.0], &[8.0]]).unwrap();
        let sol = solve_spd(&a, &b).unwrap();
        assert!((sol.x.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((sol.x.get(1, 0) - 2.0).abs() < 1e-14);
    }

    /// Steepest descent on ‖AX − B‖² with exact line search, run long enough to converge.
    fn gradient_descent_solve(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut x = Matrix::zeros(b.rows(), b.cols());
        let ata = a.transpose().matmul(a).unwrap();
        let atb = a.transpose().matmul(b).unwrap();
        for _ in 0..20_000 {
            // gradient direction of 0.5‖AX−B‖²: AᵀA X − AᵀB
            let g = ata.matmul(&x).unwrap().sub(&atb).unwrap();
            let gg: f64 = g.data().iter().map(|v| v * v).sum();
            if gg < 1e-30 {
                break;
            }
            let ag = ata.matmul(&g).unwrap();
            let gag: f64 = g.data().iter().zip(ag.data()).map(|(a, b)| a * b).sum();
            x = x.sub(&g.scale(gg / gag)).unwrap();
        }
        x
    }

    #[test]
    fn random_spd_matches_iterative_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random(&mut rng, 8, 8);
        let a = m.transpose().matmul(&m).unwrap().add(&Matrix::identity(8)).unwrap();
        let b = random(&mut rng, 8, 3);
        let sol = solve_spd(&a, &b).unwrap();
        let oracle = gradient_descent_solve(&a, &b);
        assert!(sol.x.sub(&oracle).unwrap().frobenius_norm() < 1e-8);
    }

    #[test]
    fn singular_matrix_is_regularized() {
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let sol = solve_spd(&a, &b).unwrap();
        assert_eq!(sol.ridge, Some(1e-6));
        assert!(sol.x.is_finite());
    }

    #[test]
    fn zero_matrix_is_irreparable() {
        let a = Matrix::<f64>::zeros(2, 2);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(solve_spd(&a, &b), Err(NumericsError::Singular));
    }

    #[test]
    fn rejects_asymmetric_and_mismatched() {
        let a = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert!(matches!(solve_spd(&a, &b), Err(NumericsError::NotSymmetric(_))));
        let b3 = Matrix::<f64>::zeros(3, 1);
        assert!(matches!(
            solve_spd(&Matrix::identity(2), &b3),
            Err(NumericsError::DimensionMismatch { .. })
        ));
        let bad = Matrix::from_rows(&[&[f64::NAN]]).unwrap();
        assert!(matches!(
            solve_spd(&bad, &Matrix::identity(1)),
            Err(NumericsError::NonFinite(_))
        ));
    }

    #[test]
    fn pseudoinverse_trivial_cases() {
        let pi = pseudoinverse(&Matrix::identity(4)).unwrap();
        assert!(max_abs_diff(&pi, &Matrix::identity(4)) < 1e-12);
        let two = Matrix::from_rows(&[&[2.0]]).unwrap();
        assert_eq!(pseudoinverse(&two).unwrap().data(), &[0.5]);
    }

    #[test]
    fn pseudoinverse_full_column_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random(&mut rng, 4, 2);
        let kp = pseudoinverse(&k).unwrap();
        let left = kp.matmul(&k).unwrap();
        assert!(max_abs_diff(&left, &Matrix::identity(2)) < 1e-8);
        let back = k.matmul(&kp).unwrap().matmul(&k).unwrap();
        assert!(max_abs_diff(&back, &k) < 1e-8);
    }

    #[test]
    fn pseudoinverse_rank_deficient_wide() {
        // rank-one 2x3
        let k = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]).unwrap();
        let kp = pseudoinverse(&k).unwrap();
        let back = k.matmul(&kp).unwrap().matmul(&k).unwrap();
        assert!(max_abs_diff(&back, &k) < 1e-10);
        let back2 = kp.matmul(&k).unwrap().matmul(&kp).unwrap();
        assert!(max_abs_diff(&back2, &kp) < 1e-10);
    }

    #[test]
    fn plumbing_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 5);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(Matrix::<f64>::zeros(3, 3).frobenius_norm(), 0.0);
        let c = Matrix::from_vec(2, 3, vec![0.25f32; 6]).unwrap();
        let stats = column_stats(&c).unwrap();
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.mean, vec![0.25; 3]);
        assert!(a.matmul(&a).is_err());
        assert!(column_stats(&Matrix::<f32>::zeros(0, 3)).is_err());
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(&mut rng, 6, 6);
        let a = m.transpose().matmul(&m).unwrap();
        let eig = symmetric_eigen(&a).unwrap();
        let mut diag = Matrix::zeros(6, 6);
        for i in 0..6 {
            diag.set(i, i, eig.values[i]);
        }
        let rebuilt = eig
            .vectors
            .matmul(&diag)
            .unwrap()
            .matmul(&eig.vectors.transpose())
            .unwrap();
        assert!(max_abs_diff(&rebuilt, &a) < 1e-10);
        assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }
}
