//! B-spline bases, difference penalties, sum-to-zero constraints and
//! tensor-product building blocks.
//!
//! Everything here is a pure function of its inputs. Design matrices are
//! dense `nalgebra` matrices; the model layer converts them to sparse rows.

use crate::linalg::{numerical_rank, sym_eigenvalues};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("value {value} lies outside the knot range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("knot vector must be nondecreasing")]
    UnsortedKnots,
    #[error("knot vector of length {knots} is too short for degree {degree}")]
    TooFewKnots { knots: usize, degree: usize },
    #[error("difference order {order} must satisfy 0 < order < dimension {dim}")]
    DifferenceOrder { order: usize, dim: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("variance parameters must be positive (got {0})")]
    NonPositiveVariance(f64),
    #[error("invalid basis range [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },
}

/// A B-spline basis given by its degree and full knot vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasisDef {
    pub degree: usize,
    pub knots: Vec<f64>,
}

impl SplineBasisDef {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self, BasisError> {
        if knots.windows(2).any(|w| w[1] < w[0]) || knots.iter().any(|k| !k.is_finite()) {
            return Err(BasisError::UnsortedKnots);
        }
        if knots.len() < degree + 2 {
            return Err(BasisError::TooFewKnots {
                knots: knots.len(),
                degree,
            });
        }
        if knots[0] >= knots[knots.len() - 1] {
            return Err(BasisError::InvalidRange {
                lo: knots[0],
                hi: knots[knots.len() - 1],
            });
        }
        Ok(Self { degree, knots })
    }

    /// Clamped knot vector with `n_knots` knots in total: the two boundary
    /// knots each appear `degree + 1` times and the remaining
    /// `n_knots - 2 (degree + 1)` interior knots are equidistant.
    pub fn equidistant(lo: f64, hi: f64, n_knots: usize, degree: usize) -> Result<Self, BasisError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(BasisError::InvalidRange { lo, hi });
        }
        if n_knots < 2 * (degree + 1) {
            return Err(BasisError::TooFewKnots {
                knots: n_knots,
                degree,
            });
        }
        let interior = n_knots - 2 * (degree + 1);
        let mut knots = vec![lo; degree + 1];
        for j in 1..=interior {
            knots.push(lo + (hi - lo) * j as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Self::new(degree, knots)
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn lo(&self) -> f64 {
        self.knots[0]
    }

    pub fn hi(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Index of the knot span containing `t` (last non-empty span at the
    /// right boundary).
    fn span(&self, t: f64) -> usize {
        let n = self.n_basis();
        let k = &self.knots;
        if t >= self.hi() {
            let mut mu = n - 1;
            while mu > self.degree && k[mu] >= k[mu + 1] {
                mu -= 1;
            }
            return mu;
        }
        // largest mu with k[mu] <= t < k[mu+1]
        let mut lo = self.degree;
        let mut hi = n; // k[n] >= hi() > t
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if k[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Nonzero basis values at `t`: returns the index of the first nonzero
    /// function and the `degree + 1` values.
    pub fn local(&self, t: f64) -> Result<(usize, Vec<f64>), BasisError> {
        if !(t >= self.lo() && t <= self.hi()) {
            return Err(BasisError::OutOfRange {
                value: t,
                lo: self.lo(),
                hi: self.hi(),
            });
        }
        let p = self.degree;
        let k = &self.knots;
        let mu = self.span(t);
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - k[mu + 1 - j];
            right[j] = k[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((mu - p, n))
    }

    /// Like [`local`](Self::local) but clamps `t` into the knot range,
    /// reporting whether clamping happened.
    pub fn local_clamped(&self, t: f64) -> (usize, Vec<f64>, bool) {
        let c = t.clamp(self.lo(), self.hi());
        let (first, vals) = self.local(c).expect("clamped value is in range");
        (first, vals, c != t)
    }
}

/// Evaluate all basis functions at every `t`: an `|t| x D` matrix.
pub fn bspline_design(def: &SplineBasisDef, t: &[f64]) -> Result<DMatrix<f64>, BasisError> {
    let d = def.n_basis();
    let mut x = DMatrix::zeros(t.len(), d);
    for (i, &ti) in t.iter().enumerate() {
        let (first, vals) = def.local(ti)?;
        for (r, v) in vals.into_iter().enumerate() {
            x[(i, first + r)] = v;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyKind {
    Difference { order: usize },
    Identity,
    Zero,
    /// Two marginal directions. `matrices` holds the marginals `[K_s, K_t]`;
    /// [`PenaltyDef::enlarged`] expands them to `K_s ⊗ I` and `I ⊗ K_t`.
    Anisotropic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyDef {
    pub kind: PenaltyKind,
    pub dimension: usize,
    pub matrices: Vec<DMatrix<f64>>,
}

impl PenaltyDef {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: PenaltyKind::Identity,
            dimension: dim,
            matrices: vec![DMatrix::identity(dim, dim)],
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            kind: PenaltyKind::Zero,
            dimension: dim,
            matrices: vec![DMatrix::zeros(dim, dim)],
        }
    }

    /// The single penalty matrix of an isotropic penalty.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrices[0]
    }

    pub fn anisotropic(k_s: DMatrix<f64>, k_t: DMatrix<f64>) -> Self {
        Self {
            kind: PenaltyKind::Anisotropic,
            dimension: k_s.nrows() * k_t.nrows(),
            matrices: vec![k_s, k_t],
        }
    }

    /// The full-dimension penalty matrices (`K̃_s`, `K̃_t` for anisotropic
    /// penalties, the single matrix otherwise).
    pub fn enlarged(&self) -> Vec<DMatrix<f64>> {
        match self.kind {
            PenaltyKind::Anisotropic => {
                let (s, t) = enlarged_marginals(&self.matrices[0], &self.matrices[1]);
                vec![s, t]
            }
            _ => self.matrices.clone(),
        }
    }

    pub fn rank(&self) -> usize {
        match self.kind {
            PenaltyKind::Zero => 0,
            PenaltyKind::Anisotropic => {
                // eigenvalues of a Kronecker sum are pairwise sums
                let es = sym_eigenvalues(&self.matrices[0]);
                let et = sym_eigenvalues(&self.matrices[1]);
                let sums: Vec<f64> =
                    es.iter().flat_map(|a| et.iter().map(move |b| a + b)).collect();
                numerical_rank(&sums)
            }
            _ => {
                let sum = self
                    .matrices
                    .iter()
                    .fold(DMatrix::zeros(self.dimension, self.dimension), |a, m| a + m);
                numerical_rank(&sym_eigenvalues(&sum))
            }
        }
    }
}

/// The `(D - r) x D` matrix of `r`-th order differences.
pub fn difference_matrix(dim: usize, order: usize) -> Result<DMatrix<f64>, BasisError> {
    if order == 0 || order >= dim {
        return Err(BasisError::DifferenceOrder { order, dim });
    }
    let mut d = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, dim);
        for i in 0..rows {
            for j in 0..dim {
                next[(i, j)] = d[(i + 1, j)] - d[(i, j)];
            }
        }
        d = next;
    }
    Ok(d)
}

/// `K = D_r' D_r` for a basis of dimension `dim`.
pub fn difference_penalty(dim: usize, order: usize) -> Result<PenaltyDef, BasisError> {
    let d = difference_matrix(dim, order)?;
    Ok(PenaltyDef {
        kind: PenaltyKind::Difference { order },
        dimension: dim,
        matrices: vec![d.transpose() * d],
    })
}

/// Reparameterization `beta = Z beta_dot` that removes the direction of the
/// basis column sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTransform {
    pub z: DMatrix<f64>,
    pub applied: bool,
    pub warning: Option<String>,
}

impl ConstraintTransform {
    pub fn none(dim: usize) -> Self {
        Self {
            z: DMatrix::identity(dim, dim),
            applied: false,
            warning: None,
        }
    }
}

/// Orthonormal basis (`D x (D-1)`) of the complement of `c`, taken from the
/// Householder reflection whose first column is parallel to `c`.
pub fn orthogonal_complement(c: &DVector<f64>) -> DMatrix<f64> {
    let d = c.len();
    let norm = c.norm();
    if norm == 0.0 {
        return DMatrix::identity(d, d).columns(1, d - 1).into_owned();
    }
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let h = DMatrix::identity(d, d) - (&v * v.transpose()) * (2.0 / vv);
    h.columns(1, d - 1).into_owned()
}

/// Sum-to-zero reparameterization of a basis `x` with penalty `k`.
///
/// Returns `X Z`, `Z' K Z` and the transform. The columns of `X Z` sum to
/// zero, so fitted values `X Z b` sum to zero over the rows of `x`.
pub fn sum_to_zero(
    x: &DMatrix<f64>,
    k: &PenaltyDef,
) -> Result<(DMatrix<f64>, PenaltyDef, ConstraintTransform), BasisError> {
    let d = x.ncols();
    if d < 2 {
        return Err(BasisError::Dimension(format!(
            "sum-to-zero constraint needs at least 2 columns, got {d}"
        )));
    }
    if k.dimension != d {
        return Err(BasisError::Dimension(format!(
            "penalty dimension {} does not match basis dimension {d}",
            k.dimension
        )));
    }
    let colsum = DVector::from_iterator(d, x.column_iter().map(|c| c.sum()));
    let z = orthogonal_complement(&colsum);
    let x_dot = x * &z;
    let gram = x_dot.transpose() * &x_dot;
    let rank = numerical_rank(&sym_eigenvalues(&gram));
    let warning = (rank < d - 1)
        .then(|| format!("constrained basis has rank {rank} < {}", d - 1));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let k_dot = PenaltyDef {
        kind: k.kind,
        dimension: d - 1,
        matrices: k.matrices.iter().map(|m| z.transpose() * m * &z).collect(),
    };
    Ok((
        x_dot,
        k_dot,
        ConstraintTransform {
            z,
            applied: true,
            warning,
        },
    ))
}

/// Row tensor product: row `i` of the result is `A[i,:] ⊗ B[i,:]`.
pub fn row_tensor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, BasisError> {
    if a.nrows() != b.nrows() {
        return Err(BasisError::Dimension(format!(
            "row tensor of {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let (p, na, nb) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(p, na * nb);
    for i in 0..p {
        for j in 0..na {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for l in 0..nb {
                out[(i, j * nb + l)] = aij * b[(i, l)];
            }
        }
    }
    Ok(out)
}

/// `(1/tau_s2) (K_s ⊗ I_D) + (1/tau_t2) (I_n ⊗ K_t)`.
pub fn anisotropic_penalty(
    k_s: &DMatrix<f64>,
    k_t: &DMatrix<f64>,
    tau2_s: f64,
    tau2_t: f64,
) -> Result<DMatrix<f64>, BasisError> {
    for &v in &[tau2_s, tau2_t] {
        if !(v > 0.0) {
            return Err(BasisError::NonPositiveVariance(v));
        }
    }
    if !k_s.is_square() || !k_t.is_square() {
        return Err(BasisError::Dimension("marginal penalties must be square".into()));
    }
    let (enlarged_s, enlarged_t) = enlarged_marginals(k_s, k_t);
    Ok(enlarged_s / tau2_s + enlarged_t / tau2_t)
}

/// `(K_s ⊗ I_D, I_n ⊗ K_t)`.
pub fn enlarged_marginals(k_s: &DMatrix<f64>, k_t: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = k_s.nrows();
    let d = k_t.nrows();
    (
        k_s.kronecker(&DMatrix::<f64>::identity(d, d)),
        DMatrix::<f64>::identity(n, n).kronecker(k_t),
    )
}
