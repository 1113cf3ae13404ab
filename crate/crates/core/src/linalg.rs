//! Small dense/sparse linear-algebra helpers shared by the model layers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use std::f64::consts::PI;

/// Relative eigenvalue threshold used when counting the rank of a penalty.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Compressed row storage for design matrices.
///
/// Most rows touch only a handful of columns (B-spline support, indicator
/// columns of random effects), so products are done row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_row<I: IntoIterator<Item = (usize, f64)>>(&mut self, row: I) {
        for (j, v) in row {
            debug_assert!(j < self.ncols);
            if v != 0.0 {
                self.indices.push(j);
                self.values.push(v);
            }
        }
        self.indptr.push(self.indices.len());
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = Self::new(m.ncols());
        for i in 0..m.nrows() {
            out.push_row((0..m.ncols()).map(|j| (j, m[(i, j)])));
        }
        out
    }

    pub fn nrows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    #[inline]
    pub fn row_dot(&self, i: usize, beta: &[f64]) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter().zip(val).map(|(&j, &v)| v * beta[j]).sum()
    }

    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row_dot(i, beta)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                m[(i, j)] += v;
            }
        }
        m
    }
}

/// Dense Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut v: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Number of eigenvalues above `RANK_TOLERANCE * max eigenvalue`.
pub fn numerical_rank(eigenvalues: &[f64]) -> usize {
    let max = eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return 0;
    }
    eigenvalues.iter().filter(|&&e| e > RANK_TOLERANCE * max).count()
}

/// Log of the product of the positive eigenvalues (pseudo-determinant).
pub fn pseudo_log_det(eigenvalues: &[f64]) -> f64 {
    let max = eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b));
    if max <= 0.0 {
        return 0.0;
    }
    eigenvalues
        .iter()
        .filter(|&&e| e > RANK_TOLERANCE * max)
        .map(|e| e.ln())
        .sum()
}

/// Cholesky factor of a symmetric matrix that should be positive definite.
///
/// Tries the plain factorization first, then adds a ridge of
/// `1e-6 * max|diag|`, growing it tenfold a few times.
/// Returns the factor and the ridge that was needed.
pub fn cholesky_with_ridge(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some((c, 0.0));
    }
    let scale = m.diagonal().amax().max(1e-12);
    let mut ridge = 1e-6 * scale;
    for _ in 0..8 {
        let mut r = m.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(r) {
            return Some((c, ridge));
        }
        ridge *= 10.0;
    }
    None
}

/// Clamp the spectrum of a symmetric matrix from below at
/// `floor_rel * max eigenvalue`, returning a positive-definite matrix.
pub fn clamp_spectrum(m: &DMatrix<f64>, floor_rel: f64) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.amax();
    if !(max > 0.0) {
        return None;
    }
    let floor = floor_rel * max;
    let vals = eig.eigenvalues.map(|e| e.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Some(out)
}

/// Log density of `N(mean, precision^{-1})` at `x`, given the Cholesky
/// factor of the precision matrix.
pub fn mvn_log_density_prec(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    prec_chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let d = x - mean;
    let l = prec_chol.l_dirty();
    // (x-m)' P (x-m) = || L' (x-m) ||^2 with P = L L'
    let mut quad = 0.0;
    let n = d.len();
    for j in 0..n {
        let mut s = 0.0;
        for i in j..n {
            s += l[(i, j)] * d[i];
        }
        quad += s * s;
    }
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * (n as f64) * (2.0 * PI).ln() + 0.5 * log_det - 0.5 * quad
}

/// Draw `mean + L'^{-1} z` where `P = L L'`, i.e. a sample from
/// `N(mean, P^{-1})` given standard normal `z`.
pub fn mvn_draw_prec(
    mean: &DVector<f64>,
    prec_chol: &Cholesky<f64, Dyn>,
    z: &DVector<f64>,
) -> DVector<f64> {
    let lt = prec_chol.l_dirty().transpose();
    let n = z.len();
    // back substitution on the upper-triangular L'
    let mut v = DVector::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for j in (i + 1)..n {
            s -= lt[(i, j)] * v[j];
        }
        v[i] = s / lt[(i, i)];
    }
    mean + v
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
