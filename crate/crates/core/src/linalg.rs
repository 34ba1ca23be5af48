//! Dense real linear algebra: a row-major matrix type, cyclic Jacobi
//! eigendecomposition for symmetric matrices, Householder QR, one-sided Jacobi
//! SVD and truncated least squares.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Row-major dense matrix of finite reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Wraps row-major `data`. Rejects a length mismatch or any non-finite entry.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Column vector (n×1).
    pub fn column_vector(v: &[f64]) -> Result<Self> {
        Self::new(v.len(), 1, v.to_vec())
    }

    /// Internal constructor for buffers produced by finite arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            MatRef::row_major(&self.data, self.cols),
            MatRef::row_major(&other.data, other.cols),
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Submatrix gathered from the given row and column indices.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                data.push(self[(i, j)]);
            }
        }
        DenseMatrix::from_raw(rows.len(), cols.len(), data)
    }

    /// Largest asymmetry |a_ij - a_ji| relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Strided read-only view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub(crate) fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `a` m×k, `b` k×n, `c` row-major m×n.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let span = |r: MatRef<'_>, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * r.rs + (cols - 1) as isize * r.cs) as usize + 1
        }
    };
    assert!(a.data.len() >= span(a, m, k));
    assert!(b.data.len() >= span(b, k, n));
    // SAFETY: bounds of every strided access were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spectrum of a symmetric matrix with eigenvalues sorted descending and the
/// matching eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Rotations are skipped once an off-diagonal entry is negligible relative to
/// its diagonal pair; the iteration stops after a sweep without rotations.
pub fn sym_eig(m: &DenseMatrix) -> Result<SymEigResult> {
    let n = m.rows();
    if !m.is_square() || n == 0 {
        return Err(Error::Shape(format!(
            "sym_eig needs a non-empty square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite entry in sym_eig input".into()));
    }
    if m.asymmetry() > 1e-12 {
        return Err(Error::Shape(format!(
            "matrix is not symmetric (relative asymmetry {:.3e})",
            m.asymmetry()
        )));
    }

    let mut a = m.as_slice().to_vec();
    // exact symmetrization so the rotation updates stay consistent
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut v = DenseMatrix::identity(n).data;
    let norm = m.frobenius_norm();
    let floor = f64::MIN_POSITIVE.max(norm * f64::EPSILON * f64::EPSILON);

    let mut converged = n == 1 || norm == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                algorithm: "cyclic Jacobi",
                sweeps,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                if apq.abs() <= floor || apq.abs() <= f64::EPSILON * (app * aqq).abs().sqrt() {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = !rotated;
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps ties in index order, so the result is deterministic
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new_col] = v[k * n + old_col];
        }
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors: DenseMatrix::from_raw(n, n, vecs),
    })
}

/// Thin Householder QR of an m×n matrix with m ≥ n. The diagonal of `r` is
/// made non-negative, which makes the factorization unique for full-rank input.
pub fn householder_qr(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let (m, n) = a.shape();
    if m < n || n == 0 {
        return Err(Error::Shape(format!("householder_qr needs rows >= cols >= 1, got {m}x{n}")));
    }
    // column-major working copy
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &w[k][k..];
        let alpha = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut u = x.to_vec();
        if alpha > 0.0 {
            let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
            u[0] += sign * alpha;
            let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= un);
            for col in w.iter_mut().skip(k) {
                let d = dot(&u, &col[k..]);
                for (ci, ui) in col[k..].iter_mut().zip(&u) {
                    *ci -= 2.0 * d * ui;
                }
            }
        } else {
            u.iter_mut().for_each(|v| *v = 0.0);
        }
        reflectors.push(u);
    }
    let mut r = DenseMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            r[(i, j)] = w[j][i];
        }
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n unit vectors
    let mut q = DenseMatrix::zeros(m, n);
    for j in 0..n {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        for k in (0..n).rev() {
            let u = &reflectors[k];
            let d = dot(u, &e[k..]);
            for (ei, ui) in e[k..].iter_mut().zip(u) {
                *ei -= 2.0 * d * ui;
            }
        }
        for i in 0..m {
            q[(i, j)] = e[i];
        }
    }
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for c in j..n {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok((q, r))
}

/// Singular value decomposition `A = U diag(s) Vᵀ` in thin form.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Columns are left singular vectors; zero columns where `s` is zero.
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

/// One-sided (Hestenes) Jacobi SVD. Tall inputs are first reduced by QR so the
/// rotations act on an n×n triangle.
pub fn svd(a: &DenseMatrix) -> Result<Svd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite entry in svd input".into()));
    }
    if m > n {
        let (q, r) = householder_qr(a)?;
        let inner = jacobi_svd(&r)?;
        let u = q.matmul(&inner.u)?;
        return Ok(Svd { u, ..inner });
    }
    jacobi_svd(a)
}

fn jacobi_svd(a: &DenseMatrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let scale = a.frobenius_norm();
    let floor = f64::MIN_POSITIVE.max(scale * scale * f64::EPSILON * f64::EPSILON);
    let tol = (m.max(n) as f64) * f64::EPSILON;
    let mut sweeps = 0;
    loop {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                algorithm: "one-sided Jacobi",
                sweeps,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let alpha = dot(&g[i], &g[i]);
                let beta = dot(&g[j], &g[j]);
                let gamma = dot(&g[i], &g[j]);
                if gamma.abs() <= floor || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut g, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = g.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sv[y].total_cmp(&sv[x]));
    let mut u = DenseMatrix::zeros(m, n);
    let mut vm = DenseMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let s = sv[j];
        for r in 0..m {
            u[(r, k)] = if s > 0.0 { g[j][r] / s } else { 0.0 };
        }
        for r in 0..n {
            vm[(r, k)] = v[j][r];
        }
    }
    sv = order.iter().map(|&j| sv[j]).collect();
    Ok(Svd {
        u,
        singular_values: sv,
        v: vm,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    for (x, y) in left[i].iter_mut().zip(right[0].iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Singular values in descending order.
pub fn singular_values(a: &DenseMatrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.singular_values)
}

/// Minimum-norm least-squares solution of `min ‖Ax − b‖₂`, treating singular
/// values below `trunc_tol · σ_max` as zero.
pub fn truncated_lstsq(a: &DenseMatrix, b: &[f64], trunc_tol: f64) -> Result<Vec<f64>> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Shape("least squares with an empty matrix".into()));
    }
    if b.len() != m {
        return Err(Error::Shape(format!("rhs of length {} against {} rows", b.len(), m)));
    }
    if !(trunc_tol >= 0.0) {
        return Err(Error::Domain(format!("truncation tolerance {trunc_tol} must be >= 0")));
    }
    let dec = svd(a)?;
    let smax = dec.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = trunc_tol * smax;
    let mut x = vec![0.0; n];
    for (k, &s) in dec.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let mut ub = 0.0;
        for r in 0..m {
            ub += dec.u[(r, k)] * b[r];
        }
        let coef = ub / s;
        for (r, xr) in x.iter_mut().enumerate() {
            *xr += coef * dec.v[(r, k)];
        }
    }
    Ok(x)
}
