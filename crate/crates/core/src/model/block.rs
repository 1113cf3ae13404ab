use super::{JointData, ModelError, Predictor, SplineSettings, TermKind, TermSpec};
use crate::basis::{
    difference_penalty, sum_to_zero, ConstraintTransform, PenaltyDef, PenaltyKind,
    SplineBasisDef,
};
use crate::likelihood::QuadratureGrid;
use crate::linalg::{numerical_rank, sym_eigenvalues, SparseRows, RANK_TOLERANCE};
use nalgebra::{DMatrix, DVector};
use std::ops::Range;
use std::sync::Arc;

/// Variance of the vague normal prior on unpenalized coefficients.
pub const VAGUE_PRIOR_VARIANCE: f64 = 1.0e6;

/// Points of the uniform reference grid whose column sums define the
/// sum-to-zero constraint of time smooths.
pub const TIME_REFERENCE_POINTS: usize = 200;

/// How one term turns `(subject, time)` into a design row.
#[derive(Debug, Clone)]
pub enum TermBasis {
    Intercept,
    /// Linear effect of a baseline covariate (one value per subject).
    Linear { values: Vec<f64> },
    /// Linear effect of time.
    LinearTime,
    Smooth {
        values: Vec<f64>,
        def: SplineBasisDef,
        transform: ConstraintTransform,
    },
    SmoothTime {
        def: SplineBasisDef,
        transform: ConstraintTransform,
    },
    RandomIntercept { n: usize },
    /// Row tensor of the subject indicator and a (constrained) time basis;
    /// coefficient `s * d_t + l` belongs to subject `s`, time function `l`.
    Functional {
        def: SplineBasisDef,
        transform: ConstraintTransform,
        n: usize,
    },
}

fn spline_row(def: &SplineBasisDef, tr: &ConstraintTransform, x: f64, offset: usize, out: &mut Vec<(usize, f64)>) -> bool {
    let (first, vals, clamped) = def.local_clamped(x);
    if tr.applied {
        let z = &tr.z;
        for j in 0..z.ncols() {
            let v: f64 = vals.iter().enumerate().map(|(r, b)| b * z[(first + r, j)]).sum();
            out.push((offset + j, v));
        }
    } else {
        out.extend(vals.into_iter().enumerate().map(|(r, v)| (offset + first + r, v)));
    }
    clamped
}

impl TermBasis {
    pub fn ncols(&self) -> usize {
        match self {
            TermBasis::Intercept | TermBasis::Linear { .. } | TermBasis::LinearTime => 1,
            TermBasis::Smooth { transform, .. } | TermBasis::SmoothTime { transform, .. } => {
                transform.z.ncols()
            }
            TermBasis::RandomIntercept { n } => *n,
            TermBasis::Functional { transform, n, .. } => n * transform.z.ncols(),
        }
    }

    /// Appends the nonzero entries of the design row at `(subject, t)`.
    /// Returns `true` if a value had to be clamped into the basis range.
    pub fn row(&self, subject: usize, t: f64, out: &mut Vec<(usize, f64)>) -> bool {
        out.clear();
        match self {
            TermBasis::Intercept => {
                out.push((0, 1.0));
                false
            }
            TermBasis::Linear { values } => {
                out.push((0, values[subject]));
                false
            }
            TermBasis::LinearTime => {
                out.push((0, t));
                false
            }
            TermBasis::Smooth { values, def, transform } => {
                spline_row(def, transform, values[subject], 0, out)
            }
            TermBasis::SmoothTime { def, transform } => spline_row(def, transform, t, 0, out),
            TermBasis::RandomIntercept { .. } => {
                out.push((subject, 1.0));
                false
            }
            TermBasis::Functional { def, transform, .. } => {
                let dt = transform.z.ncols();
                spline_row(def, transform, t, subject * dt, out)
            }
        }
    }
}

/// Prior precision structure of a block.
#[derive(Debug, Clone)]
pub enum BlockPrior {
    /// Independent `N(0, VAGUE_PRIOR_VARIANCE)`.
    Vague,
    /// `β ~ N(0, τ² K⁻)`.
    Isotropic { k: DMatrix<f64>, rank: usize },
    /// `β ~ N(0, P⁻)` with `P = K_s ⊗ I / τ_s² + I ⊗ K_t / τ_t²`.
    Anisotropic {
        k_s: DMatrix<f64>,
        k_t: DMatrix<f64>,
        eig_s: Vec<f64>,
        eig_t: Vec<f64>,
        /// Mask of structurally positive eigenvalue sums (index `i * d_t + j`).
        positive: Vec<bool>,
        rank: usize,
    },
}

impl BlockPrior {
    pub fn from_penalty(p: &PenaltyDef) -> Self {
        match p.kind {
            PenaltyKind::Zero => BlockPrior::Vague,
            PenaltyKind::Anisotropic => {
                let eig_s = sym_eigenvalues(&p.matrices[0]);
                let eig_t = sym_eigenvalues(&p.matrices[1]);
                let sums: Vec<f64> = eig_s
                    .iter()
                    .flat_map(|a| eig_t.iter().map(move |b| a + b))
                    .collect();
                let max = sums.iter().fold(0.0_f64, |a, &b| a.max(b));
                let positive: Vec<bool> = sums.iter().map(|&v| v > RANK_TOLERANCE * max).collect();
                let rank = positive.iter().filter(|&&b| b).count();
                BlockPrior::Anisotropic {
                    k_s: p.matrices[0].clone(),
                    k_t: p.matrices[1].clone(),
                    eig_s,
                    eig_t,
                    positive,
                    rank,
                }
            }
            _ => {
                let k = p.matrices[0].clone();
                let rank = numerical_rank(&sym_eigenvalues(&k));
                BlockPrior::Isotropic { k, rank }
            }
        }
    }

    /// Number of variance parameters (0, 1 or 2).
    pub fn n_variances(&self) -> usize {
        match self {
            BlockPrior::Vague => 0,
            BlockPrior::Isotropic { .. } => 1,
            BlockPrior::Anisotropic { .. } => 2,
        }
    }

    pub fn rank(&self, dim: usize) -> usize {
        match self {
            BlockPrior::Vague => dim,
            BlockPrior::Isotropic { rank, .. } | BlockPrior::Anisotropic { rank, .. } => *rank,
        }
    }

    /// Dense prior precision `P(τ²)`.
    pub fn precision(&self, dim: usize, tau2: &[f64]) -> DMatrix<f64> {
        match self {
            BlockPrior::Vague => DMatrix::identity(dim, dim) / VAGUE_PRIOR_VARIANCE,
            BlockPrior::Isotropic { k, .. } => k / tau2[0],
            BlockPrior::Anisotropic { k_s, k_t, .. } => {
                crate::basis::anisotropic_penalty(k_s, k_t, tau2[0], tau2[1])
                    .expect("variances validated on assignment")
            }
        }
    }

    /// `P(τ²) β` without forming `P`.
    pub fn precision_times(&self, tau2: &[f64], beta: &[f64]) -> DVector<f64> {
        let p = beta.len();
        match self {
            BlockPrior::Vague => DVector::from_iterator(p, beta.iter().map(|b| b / VAGUE_PRIOR_VARIANCE)),
            BlockPrior::Isotropic { k, .. } => (k * DVector::from_column_slice(beta)) / tau2[0],
            BlockPrior::Anisotropic { k_s, k_t, .. } => {
                let n = k_s.nrows();
                let d = k_t.nrows();
                // row-major reshape: B[s, l] = beta[s * d + l]
                let b = DMatrix::from_row_slice(n, d, beta);
                let m = (k_s * &b) / tau2[0] + (&b * k_t) / tau2[1];
                DVector::from_iterator(p, (0..n).flat_map(|s| (0..d).map(move |l| (s, l))).map(|(s, l)| m[(s, l)]))
            }
        }
    }

    /// The quadratic forms of the penalty matrices, without variances:
    /// `[βᵀKβ]` or `[βᵀ(K_s⊗I)β, βᵀ(I⊗K_t)β]`.
    pub fn quad_forms(&self, beta: &[f64]) -> Vec<f64> {
        match self {
            BlockPrior::Vague => vec![beta.iter().map(|b| b * b).sum()],
            BlockPrior::Isotropic { k, .. } => {
                let b = DVector::from_column_slice(beta);
                vec![b.dot(&(k * &b)).max(0.0)]
            }
            BlockPrior::Anisotropic { k_s, k_t, .. } => {
                let n = k_s.nrows();
                let d = k_t.nrows();
                let b = DMatrix::from_row_slice(n, d, beta);
                let qs = (b.transpose() * k_s * &b).trace();
                let qt = (&b * k_t * b.transpose()).trace();
                vec![qs.max(0.0), qt.max(0.0)]
            }
        }
    }

    /// Pseudo log-determinant of the anisotropic precision over the
    /// structurally positive eigen-directions.
    pub fn anisotropic_log_det(&self, tau2: &[f64]) -> f64 {
        match self {
            BlockPrior::Anisotropic { eig_s, eig_t, positive, .. } => {
                let d = eig_t.len();
                let mut s = 0.0;
                for (i, a) in eig_s.iter().enumerate() {
                    for (j, b) in eig_t.iter().enumerate() {
                        if positive[i * d + j] {
                            s += (a.max(0.0) / tau2[0] + b.max(0.0) / tau2[1]).ln();
                        }
                    }
                }
                s
            }
            _ => 0.0,
        }
    }

    /// Prior precision restricted to the coefficient range `r` (used for
    /// block-diagonal, subject-factorized penalties).
    pub fn group_precision(&self, r: Range<usize>, tau2: &[f64]) -> DMatrix<f64> {
        let m = r.len();
        match self {
            BlockPrior::Vague => DMatrix::identity(m, m) / VAGUE_PRIOR_VARIANCE,
            BlockPrior::Isotropic { k, .. } => k.view((r.start, r.start), (m, m)) / tau2[0],
            BlockPrior::Anisotropic { k_s, k_t, .. } => {
                let d = k_t.nrows();
                let s = r.start / d;
                debug_assert_eq!(m, d);
                DMatrix::identity(d, d) * (k_s[(s, s)] / tau2[0]) + k_t / tau2[1]
            }
        }
    }
}

/// Immutable design information of one term.
#[derive(Debug, Clone)]
pub struct TermDesign {
    pub term: TermSpec,
    pub basis: TermBasis,
    pub penalty: PenaltyDef,
    pub prior: BlockPrior,
    /// Rows at the longitudinal measurement times (`N` rows).
    pub long: SparseRows,
    /// Rows at the follow-up times `T_i` (`n` rows).
    pub surv: SparseRows,
    /// Rows at the quadrature nodes, subject-major (`n Q` rows).
    pub quad: SparseRows,
    /// Coefficient ranges of subject-specific groups when the penalty and
    /// the design factorize over subjects (random intercepts, functional
    /// random intercepts): rows of subject `i` only touch group `i`.
    pub groups: Option<Vec<Range<usize>>>,
}

impl TermDesign {
    pub fn n_coef(&self) -> usize {
        self.basis.ncols()
    }

    pub fn predictor(&self) -> Predictor {
        self.term.predictor
    }

    pub fn label(&self) -> String {
        self.term.label()
    }

    pub fn is_penalized(&self) -> bool {
        self.prior.n_variances() > 0
    }

    /// Design rows for arbitrary `(subject, time)` pairs; values outside the
    /// basis range are clamped with a warning.
    pub fn rows_at(&self, subjects: &[usize], times: &[f64]) -> SparseRows {
        let mut out = SparseRows::new(self.n_coef());
        let mut buf = Vec::new();
        let mut clamped = 0usize;
        for (&i, &t) in subjects.iter().zip(times) {
            if self.basis.row(i, t, &mut buf) {
                clamped += 1;
            }
            out.push_row(buf.iter().copied());
        }
        if clamped > 0 {
            log::warn!(
                "{}: {clamped} evaluation point(s) outside the basis range were clamped",
                self.label()
            );
        }
        out
    }
}

/// One additive term: shared design plus its current parameters.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    pub design: Arc<TermDesign>,
    pub beta: Vec<f64>,
    /// Empty for unpenalized blocks, one or two variances otherwise.
    pub tau2: Vec<f64>,
}

impl DesignBlock {
    pub fn n_coef(&self) -> usize {
        self.design.n_coef()
    }

    pub fn predictor(&self) -> Predictor {
        self.design.predictor()
    }

    pub fn label(&self) -> String {
        self.design.label()
    }

    /// Dense prior precision at the current variances.
    pub fn precision(&self) -> DMatrix<f64> {
        self.design.prior.precision(self.n_coef(), &self.tau2)
    }
}

fn time_basis(
    s: &SplineSettings,
    range: (f64, f64),
    constrained: bool,
) -> Result<(SplineBasisDef, PenaltyDef, ConstraintTransform), ModelError> {
    let def = SplineBasisDef::equidistant(range.0, range.1, s.n_knots, s.degree)?;
    let k = difference_penalty(def.n_basis(), s.diff_order)?;
    if !constrained {
        let d = def.n_basis();
        return Ok((def, k, ConstraintTransform::none(d)));
    }
    let m = TIME_REFERENCE_POINTS;
    let grid: Vec<f64> = (0..m)
        .map(|j| range.0 + (range.1 - range.0) * j as f64 / (m - 1) as f64)
        .collect();
    let x = crate::basis::bspline_design(&def, &grid)?;
    let (_, k_dot, tr) = sum_to_zero(&x, &k)?;
    Ok((def, k_dot, tr))
}

/// Builds the immutable design of one term.
pub(crate) fn build_term(
    term: &TermSpec,
    data: &JointData,
    quad: &QuadratureGrid,
) -> Result<TermDesign, ModelError> {
    term.validate()?;
    let n = data.n();
    let time_range = data.time_range();
    let covariate_values = |name: &str| -> Result<Vec<f64>, ModelError> {
        if !data.has_covariate(name) {
            return Err(ModelError::UnknownCovariate(name.to_string()));
        }
        (0..n)
            .map(|i| data.covariate(i, name).map_err(ModelError::from))
            .collect()
    };
    let check_group = |g: &str| -> Result<(), ModelError> {
        if g != "id" {
            return Err(ModelError::UnsupportedGroup(g.to_string()));
        }
        if n < 2 {
            return Err(ModelError::DegenerateGroup(g.to_string()));
        }
        Ok(())
    };

    let (basis, penalty, groups) = match &term.kind {
        TermKind::Intercept => (TermBasis::Intercept, PenaltyDef::zero(1), None),
        TermKind::Linear { covariate } if covariate == "time" => {
            if !term.predictor.is_time_varying() {
                return Err(ModelError::InvalidTerm(format!(
                    "{} is time-constant; lin(time) is not allowed there",
                    term.predictor
                )));
            }
            (TermBasis::LinearTime, PenaltyDef::zero(1), None)
        }
        TermKind::Linear { covariate } => (
            TermBasis::Linear {
                values: covariate_values(covariate)?,
            },
            PenaltyDef::zero(1),
            None,
        ),
        TermKind::Smooth { covariate, spline } => {
            let values = covariate_values(covariate)?;
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let def = SplineBasisDef::equidistant(lo, hi, spline.n_knots, spline.degree)?;
            let k = difference_penalty(def.n_basis(), spline.diff_order)?;
            let (k, transform) = if term.constrained {
                let x = crate::basis::bspline_design(&def, &values)?;
                let (_, k_dot, tr) = sum_to_zero(&x, &k)?;
                (k_dot, tr)
            } else {
                let d = def.n_basis();
                (k, ConstraintTransform::none(d))
            };
            (TermBasis::Smooth { values, def, transform }, k, None)
        }
        TermKind::SmoothTime { spline } => {
            let (def, k, transform) = time_basis(spline, time_range, term.constrained)?;
            (TermBasis::SmoothTime { def, transform }, k, None)
        }
        TermKind::RandomIntercept { group } => {
            check_group(group)?;
            (
                TermBasis::RandomIntercept { n },
                PenaltyDef::identity(n),
                Some((0..n).map(|i| i..i + 1).collect()),
            )
        }
        TermKind::FunctionalRandomIntercept { group, spline } => {
            check_group(group)?;
            let (def, k_t, transform) = time_basis(spline, time_range, term.constrained)?;
            let d = transform.z.ncols();
            let penalty = PenaltyDef::anisotropic(DMatrix::identity(n, n), k_t.matrices[0].clone());
            (
                TermBasis::Functional { def, transform, n },
                penalty,
                Some((0..n).map(|i| i * d..(i + 1) * d).collect()),
            )
        }
    };

    let p = basis.ncols();
    let mut buf = Vec::new();
    let mut long = SparseRows::new(p);
    for r in data.records() {
        basis.row(r.subject, r.time, &mut buf);
        long.push_row(buf.iter().copied());
    }
    let mut surv = SparseRows::new(p);
    let mut quad_rows = SparseRows::new(p);
    for (i, s) in data.subjects().iter().enumerate() {
        basis.row(i, s.time, &mut buf);
        surv.push_row(buf.iter().copied());
        for &u in quad.nodes(i) {
            basis.row(i, u, &mut buf);
            quad_rows.push_row(buf.iter().copied());
        }
    }
    let prior = BlockPrior::from_penalty(&penalty);
    Ok(TermDesign {
        term: term.clone(),
        basis,
        penalty,
        prior,
        long,
        surv,
        quad: quad_rows,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anisotropic_precision_times_matches_dense() {
        let ks = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        let kt = crate::basis::difference_penalty(3, 1).unwrap().matrices[0].clone();
        let prior = BlockPrior::from_penalty(&PenaltyDef::anisotropic(ks, kt));
        let beta = [0.3, -1.0, 2.0, 0.5, 0.1, -0.7];
        let tau2 = [0.7, 3.0];
        let dense = prior.precision(6, &tau2) * DVector::from_column_slice(&beta);
        let fast = prior.precision_times(&tau2, &beta);
        assert!((dense - &fast).amax() < 1e-12);
        let q = prior.quad_forms(&beta);
        let b = DVector::from_column_slice(&beta);
        assert!((q[0] / tau2[0] + q[1] / tau2[1] - b.dot(&fast)).abs() < 1e-12);
    }

    #[test]
    fn anisotropic_log_det_matches_eigen() {
        let ks = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let kt = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let prior = BlockPrior::from_penalty(&PenaltyDef::anisotropic(ks, kt));
        let tau2 = [0.5, 2.0];
        let e = sym_eigenvalues(&prior.precision(4, &tau2));
        let oracle: f64 = e.iter().filter(|&&v| v > 1e-9).map(|v| v.ln()).sum();
        assert!((prior.anisotropic_log_det(&tau2) - oracle).abs() < 1e-10);
    }
}
