//! Dense real matrices, a one-sided Jacobi reduced SVD, and the quintic
//! Newton–Schulz orthogonalizer used as an inexact spectral LMO backend.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use thiserror::Error;

/// Maximum number of Jacobi sweeps before the SVD gives up.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal tolerance for column orthogonality in the Jacobi sweeps.
pub const SVD_OFFDIAG_TOL: f64 = 1e-12;
/// Default rank cut-off, relative to the largest singular value.
pub const DEFAULT_RELATIVE_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    Shape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("entries length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("Jacobi SVD did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("orthogonalization of a zero matrix is undefined")]
    ZeroInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Row-major dense `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self[(r, c)])?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: idx / cols.max(1),
                col: idx % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::InvalidArgument("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_shape(&self, rows: usize, cols: usize) -> Result<(), LinalgError> {
        if self.shape() != (rows, cols) {
            return Err(LinalgError::Shape {
                expected_rows: rows,
                expected_cols: cols,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + s * other`, shapes must agree.
    pub fn axpy(&self, s: f64, other: &Matrix) -> Matrix {
        assert!(self.same_shape(other), "axpy shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect(),
        }
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
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

    /// `self * selfᵀ`.
    pub fn gram_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            let ri = self.row(i);
            for j in i..self.rows {
                let v: f64 = ri.iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Trace inner product ⟨A, B⟩ = Σ aᵢⱼ bᵢⱼ.
    pub fn inner(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other), "inner product shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        self.axpy(-1.0, rhs)
    }
}

impl Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

impl Mul<&Matrix> for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

/// Thin SVD `A = U diag(σ) Vᵀ` keeping only σ above `rank_tolerance`.
#[derive(Debug, Clone)]
pub struct ReducedSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub rank_tolerance: f64,
}

impl ReducedSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// The sharp operator `U Vᵀ` (a partial isometry when rank-deficient).
    pub fn polar_factor(&self) -> Matrix {
        self.u.matmul(&self.v.transpose())
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// Raw one-sided Jacobi on the columns of a tall (rows ≥ cols) matrix.
/// Works on `a/s` with `s` the largest absolute entry and returns the rotated
/// columns, their norms, `V` and `s`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix, f64), LinalgError> {
    let (m, n) = a.shape();
    // squared column norms of a/s neither underflow nor overflow
    let s = max_abs_entry(a);
    let s = if s > 0.0 && s.is_finite() { s } else { 1.0 };
    // column-major working copy for contiguous column access
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).iter().map(|x| x / s).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // columns below 1e-20·‖A‖_F are numerically zero and left alone
    let negligible = 1e-40 * cols.iter().flatten().map(|x| x * x).sum::<f64>();
    let mut converged = n < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0_f64;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(off);
                if off <= SVD_OFFDIAG_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps, residual });
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let u = Matrix::from_fn(m, n, |r, c| cols[c][r]);
    let vm = Matrix::from_fn(n, n, |r, c| v[c][r]);
    Ok((u, norms, vm, s))
}

/// Reduced SVD keeping singular values strictly above `rank_tolerance`.
pub fn reduced_svd(a: &Matrix, rank_tolerance: f64) -> Result<ReducedSvd, LinalgError> {
    if rank_tolerance.is_nan() || rank_tolerance < 0.0 {
        return Err(LinalgError::InvalidArgument(format!(
            "rank_tolerance must be >= 0, got {rank_tolerance}"
        )));
    }
    svd_impl(a, Some(rank_tolerance))
}

/// Reduced SVD with the default relative tolerance `1e-12 · σ₁`.
pub fn reduced_svd_default(a: &Matrix) -> Result<ReducedSvd, LinalgError> {
    svd_impl(a, None)
}

fn svd_impl(a: &Matrix, tol: Option<f64>) -> Result<ReducedSvd, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::InvalidArgument("matrix has non-finite entries".into()));
    }
    let wide = a.rows() < a.cols();
    let work = if wide { a.transpose() } else { a.clone() };
    let (cols, norms, v, scale) = jacobi_tall(&work)?;

    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let sigma_max = order.first().map_or(0.0, |&i| scale * norms[i]);
    let rank_tolerance = tol.unwrap_or(DEFAULT_RELATIVE_RANK_TOL * sigma_max);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| scale * norms[i] > rank_tolerance)
        .collect();

    let m = work.rows();
    let n = work.cols();
    let left = Matrix::from_fn(m, keep.len(), |r, c| cols[(r, keep[c])] / norms[keep[c]]);
    let right = Matrix::from_fn(n, keep.len(), |r, c| v[(r, keep[c])]);
    let sigma = keep.iter().map(|&i| scale * norms[i]).collect();

    let (u, v) = if wide { (right, left) } else { (left, right) };
    Ok(ReducedSvd {
        u,
        sigma,
        v,
        rank_tolerance,
    })
}

/// Coefficients and iteration count for the quintic Newton–Schulz map
/// `X ← aX + b(XXᵀ)X + c(XXᵀ)²X`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSchulz {
    pub iterations: usize,
    pub coefficients: (f64, f64, f64),
}

impl Default for NewtonSchulz {
    fn default() -> Self {
        Self {
            iterations: 6,
            coefficients: (3.4445, -4.7750, 2.0315),
        }
    }
}

/// Singular-value band reached by the default settings when the input's
/// condition number is at most 100 (measured: about [0.682, 1.20]). The
/// quintic does not converge to 1; it oscillates inside this band.
pub const NS_DEFAULT_BAND: (f64, f64) = (0.68, 1.3);

/// Approximates `U Vᵀ` of `a` by Frobenius normalization followed by the quintic
/// Newton–Schulz iteration. Tall inputs are transposed so the Gram matrix stays small.
pub fn ns_orthogonalize(a: &Matrix, ns: &NewtonSchulz) -> Result<Matrix, LinalgError> {
    if ns.iterations == 0 {
        return Err(LinalgError::InvalidArgument("iterations must be >= 1".into()));
    }
    let norm = frobenius_norm(a);
    if norm == 0.0 {
        return Err(LinalgError::ZeroInput);
    }
    let tall = a.rows() > a.cols();
    let mut x = if tall { a.transpose() } else { a.clone() };
    x = x.scale(1.0 / norm);
    let (ca, cb, cc) = ns.coefficients;
    for _ in 0..ns.iterations {
        let gram = x.gram_rows();
        let gram_sq = gram.matmul(&gram);
        let poly = gram.scale(cb).axpy(cc, &gram_sq);
        x = x.scale(ca).axpy(1.0, &poly.matmul(&x));
    }
    Ok(if tall { x.transpose() } else { x })
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    // scaled accumulation avoids overflow for large entries
    let amax = max_abs_entry(a);
    if amax == 0.0 {
        return 0.0;
    }
    let s: f64 = a.as_slice().iter().map(|v| (v / amax) * (v / amax)).sum();
    amax * s.sqrt()
}

pub fn entrywise_l1(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|v| v.abs()).sum()
}

pub fn max_abs_entry(a: &Matrix) -> f64 {
    a.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn nuclear_norm(a: &Matrix) -> Result<f64, LinalgError> {
    if a.is_zero() {
        return Ok(0.0);
    }
    Ok(reduced_svd(a, 0.0)?.sigma.iter().sum())
}

pub fn spectral_norm(a: &Matrix) -> Result<f64, LinalgError> {
    if a.is_zero() {
        return Ok(0.0);
    }
    Ok(reduced_svd(a, 0.0)?.sigma.first().copied().unwrap_or(0.0))
}
