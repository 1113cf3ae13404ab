//! Blockwise score vectors and Hessians of the log-posterior, plus a
//! finite-difference verification harness.
//!
//! For a block of predictor `k` every row of the design contributes
//! `c · x` to the score and `−d · x xᵀ` to the Hessian. With the multiplier
//! `m = 1` (λ, γ), `m = η_μ` (α) or `m = η_α` (μ):
//!
//! * event rows at `T_i`: `c = δ_i m`, `d = 0`;
//! * quadrature rows: `c = −e^{η_γ} w ω m`, `d = e^{η_γ} w ω m²`, where
//!   `ω = exp(η_λ + η_α η_μ)` is the hazard integrand;
//! * longitudinal rows of μ: `c = r / σ²`, `d = 1 / σ²`;
//! * longitudinal rows of σ: `c = r² / σ² − 1`, `d = 2 r² / σ²`.
//!
//! The prior adds `−Pβ` and `−P`.

use crate::likelihood::{hazard_terms, log_posterior, HazardTerms, LikelihoodError};
use crate::linalg::SparseRows;
use crate::model::{ModelError, ModelState, Predictor};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DerivativeError {
    #[error("block index {0} out of range")]
    NoSuchBlock(usize),
    #[error("finite-difference step must be positive (got {0})")]
    InvalidStep(f64),
    #[error("cached predictors are stale (max deviation {0:e})")]
    Stale(f64),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Hessian storage: dense, or block-diagonal over subject groups.
#[derive(Debug, Clone, PartialEq)]
pub enum Curvature {
    Dense(DMatrix<f64>),
    Grouped {
        ranges: Vec<Range<usize>>,
        blocks: Vec<DMatrix<f64>>,
    },
}

impl Curvature {
    pub fn to_dense(&self, p: usize) -> DMatrix<f64> {
        match self {
            Curvature::Dense(m) => m.clone(),
            Curvature::Grouped { ranges, blocks } => {
                let mut out = DMatrix::zeros(p, p);
                for (r, b) in ranges.iter().zip(blocks) {
                    out.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(b);
                }
                out
            }
        }
    }
}

/// Score and curvature of one block (posterior unless stated otherwise).
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub score: DVector<f64>,
    pub hessian: Curvature,
}

/// Dense derivatives of one block: posterior and likelihood-only parts.
#[derive(Debug, Clone)]
pub struct BlockGradient {
    pub score: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub loglik_score: DVector<f64>,
    pub loglik_hessian: DMatrix<f64>,
}

struct Acc<'a> {
    score: Vec<f64>,
    dense: Option<DMatrix<f64>>,
    groups: Option<(&'a [Range<usize>], Vec<DMatrix<f64>>)>,
}

impl<'a> Acc<'a> {
    fn new(p: usize, groups: Option<&'a [Range<usize>]>) -> Self {
        match groups {
            Some(g) => Self {
                score: vec![0.0; p],
                dense: None,
                groups: Some((g, g.iter().map(|r| DMatrix::zeros(r.len(), r.len())).collect())),
            },
            None => Self {
                score: vec![0.0; p],
                dense: Some(DMatrix::zeros(p, p)),
                groups: None,
            },
        }
    }

    /// Adds `c x` to the score and `−d x xᵀ` to the Hessian for design row
    /// `row` of subject `subject`.
    #[inline]
    fn add(&mut self, rows: &SparseRows, row: usize, subject: usize, c: f64, d: f64) {
        let (idx, val) = rows.row(row);
        for (&j, &v) in idx.iter().zip(val) {
            self.score[j] += c * v;
        }
        if d == 0.0 {
            return;
        }
        match (&mut self.dense, &mut self.groups) {
            (Some(h), _) => {
                for (a, (&j, &vj)) in idx.iter().zip(val).enumerate() {
                    let dv = d * vj;
                    for (&l, &vl) in idx[..=a].iter().zip(&val[..=a]) {
                        h[(j, l)] -= dv * vl;
                    }
                }
            }
            (None, Some((ranges, blocks))) => {
                let off = ranges[subject].start;
                let h = &mut blocks[subject];
                for (a, (&j, &vj)) in idx.iter().zip(val).enumerate() {
                    let dv = d * vj;
                    for (&l, &vl) in idx[..=a].iter().zip(&val[..=a]) {
                        h[(j - off, l - off)] -= dv * vl;
                    }
                }
            }
            _ => unreachable!(),
        }
    }

    fn finish(self) -> (DVector<f64>, Curvature) {
        let fill = |m: &mut DMatrix<f64>| {
            // each off-diagonal pair was accumulated once, in either triangle
            let n = m.nrows();
            for i in 0..n {
                for j in 0..i {
                    let v = m[(i, j)] + m[(j, i)];
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        };
        let score = DVector::from_vec(self.score);
        match (self.dense, self.groups) {
            (Some(mut h), _) => {
                fill(&mut h);
                (score, Curvature::Dense(h))
            }
            (None, Some((ranges, mut blocks))) => {
                blocks.iter_mut().for_each(fill);
                (
                    score,
                    Curvature::Grouped {
                        ranges: ranges.to_vec(),
                        blocks,
                    },
                )
            }
            _ => unreachable!(),
        }
    }
}

fn check_block(state: &ModelState, b: usize) -> Result<(), DerivativeError> {
    if b >= state.n_blocks() {
        return Err(DerivativeError::NoSuchBlock(b));
    }
    Ok(())
}

/// Likelihood-only score and Hessian of block `b`.
pub fn loglik_derivatives(state: &ModelState, b: usize) -> Result<Derivatives, DerivativeError> {
    check_block(state, b)?;
    let h = hazard_terms(state);
    Ok(loglik_derivatives_with(state, b, &h))
}

pub(crate) fn loglik_derivatives_with(state: &ModelState, b: usize, hz: &HazardTerms) -> Derivatives {
    let blk = state.block(b);
    let design = &blk.design;
    let k = blk.predictor();
    let data = state.data();
    let p = blk.n_coef();
    let mut acc = Acc::new(p, design.groups.as_deref());

    if k != Predictor::Sigma {
        let q = state.quad().q();
        let w = state.quad().all_weights();
        let (m_surv, m_quad): (Option<&[f64]>, Option<&[f64]>) = match k {
            Predictor::Alpha => {
                let e = state.eta(Predictor::Mu);
                (Some(&e.surv), Some(&e.quad))
            }
            Predictor::Mu => {
                let e = state.eta(Predictor::Alpha);
                (Some(&e.surv), Some(&e.quad))
            }
            _ => (None, None),
        };
        for (i, s) in data.subjects().iter().enumerate() {
            if s.event {
                let m = m_surv.map_or(1.0, |v| v[i]);
                acc.add(&design.surv, i, i, m, 0.0);
            }
        }
        if k == Predictor::Gamma {
            // time-constant: the quadrature collapses to Λ_i
            for i in 0..data.n() {
                let lam: f64 =
                    hz.exp_gamma[i] * (i * q..(i + 1) * q).map(|r| w[r] * hz.omega[r]).sum::<f64>();
                acc.add(&design.surv, i, i, -lam, lam);
            }
        } else {
            for i in 0..data.n() {
                let eg = hz.exp_gamma[i];
                for r in i * q..(i + 1) * q {
                    let base = eg * w[r] * hz.omega[r];
                    let m = m_quad.map_or(1.0, |v| v[r]);
                    acc.add(&design.quad, r, i, -base * m, base * m * m);
                }
            }
        }
    }

    if matches!(k, Predictor::Mu | Predictor::Sigma) {
        let mu = &state.eta(Predictor::Mu).long;
        let sg = &state.eta(Predictor::Sigma).long;
        for (j, rec) in data.records().iter().enumerate() {
            let inv_var = (-2.0 * sg[j]).exp();
            let res = rec.y - mu[j];
            let (c, d) = if k == Predictor::Mu {
                (res * inv_var, inv_var)
            } else {
                let z = res * res * inv_var;
                (z - 1.0, 2.0 * z)
            };
            acc.add(&design.long, j, rec.subject, c, d);
        }
    }
    let (score, hessian) = acc.finish();
    Derivatives { score, hessian }
}

/// Adds the prior gradient `−Pβ` and curvature `−P` to likelihood derivatives.
pub(crate) fn add_prior(state: &ModelState, b: usize, mut d: Derivatives) -> Derivatives {
    let blk = state.block(b);
    let prior = &blk.design.prior;
    d.score -= prior.precision_times(&blk.tau2, &blk.beta);
    match &mut d.hessian {
        Curvature::Dense(h) => *h -= prior.precision(blk.n_coef(), &blk.tau2),
        Curvature::Grouped { ranges, blocks } => {
            for (r, h) in ranges.iter().zip(blocks.iter_mut()) {
                *h -= prior.group_precision(r.clone(), &blk.tau2);
            }
        }
    }
    d
}

/// Posterior score and Hessian of block `b` in their native storage.
pub fn derivatives(state: &ModelState, b: usize) -> Result<Derivatives, DerivativeError> {
    let lik = loglik_derivatives(state, b)?;
    Ok(add_prior(state, b, lik))
}

/// Posterior score `∂ log p / ∂β_b`.
pub fn score(state: &ModelState, b: usize) -> Result<DVector<f64>, DerivativeError> {
    Ok(derivatives(state, b)?.score)
}

/// Posterior Hessian of block `b` as a dense matrix.
pub fn hessian(state: &ModelState, b: usize) -> Result<DMatrix<f64>, DerivativeError> {
    let p = state.block(b).n_coef();
    Ok(derivatives(state, b)?.hessian.to_dense(p))
}

/// Posterior and likelihood-only derivatives of block `b`, dense.
pub fn block_gradient(state: &ModelState, b: usize) -> Result<BlockGradient, DerivativeError> {
    let p = state.block(b).n_coef();
    let lik = loglik_derivatives(state, b)?;
    let loglik_score = lik.score.clone();
    let loglik_hessian = lik.hessian.to_dense(p);
    let post = add_prior(state, b, lik);
    Ok(BlockGradient {
        score: post.score,
        hessian: post.hessian.to_dense(p),
        loglik_score,
        loglik_hessian,
    })
}

/// Pass thresholds of the finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdTolerances {
    pub score: f64,
    pub hessian: f64,
}

impl Default for FdTolerances {
    fn default() -> Self {
        Self {
            score: 1e-4,
            hessian: 1e-3,
        }
    }
}

/// Finite-difference comparison for one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub block: usize,
    pub label: String,
    /// `‖s − s_fd‖∞ / max(‖s_fd‖∞, 1)`.
    pub score_error: f64,
    /// `‖H − H_fd‖_F / max(‖H_fd‖_F, 1)`.
    pub hessian_error: f64,
    /// `max |H − Hᵀ|`.
    pub asymmetry: f64,
    pub score_pass: bool,
    pub hessian_pass: bool,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.score_pass && self.hessian_pass
    }
}

/// Central finite differences of the log-posterior (for the score) and of
/// the analytic score (for the Hessian), compared block by block.
pub fn fd_check(state: &ModelState, eps: f64, tol: FdTolerances) -> Result<Vec<FdReport>, DerivativeError> {
    fd_check_with(state, eps, tol, |s, b| {
        let d = derivatives(s, b)?;
        let p = s.block(b).n_coef();
        Ok((d.score, d.hessian.to_dense(p)))
    })
}

/// [`fd_check`] against caller-supplied analytic derivatives.
pub fn fd_check_with<F>(
    state: &ModelState,
    eps: f64,
    tol: FdTolerances,
    analytic: F,
) -> Result<Vec<FdReport>, DerivativeError>
where
    F: Fn(&ModelState, usize) -> Result<(DVector<f64>, DMatrix<f64>), DerivativeError>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DerivativeError::InvalidStep(eps));
    }
    let dev = state.cache_deviation();
    if dev > 1e-12 {
        return Err(DerivativeError::Stale(dev));
    }
    let mut work = state.clone();
    let mut out = Vec::with_capacity(state.n_blocks());
    for b in 0..state.n_blocks() {
        let (s, h) = analytic(state, b)?;
        let beta0 = state.block(b).beta.clone();
        let p = beta0.len();
        let mut s_fd = DVector::zeros(p);
        let mut h_fd = DMatrix::zeros(p, p);
        let mut beta = beta0.clone();
        for j in 0..p {
            beta[j] = beta0[j] + eps;
            work.set_beta(b, &beta)?;
            let fp = log_posterior(&work)?.total;
            let sp = derivatives(&work, b)?.score;
            beta[j] = beta0[j] - eps;
            work.set_beta(b, &beta)?;
            let fm = log_posterior(&work)?.total;
            let sm = derivatives(&work, b)?.score;
            beta[j] = beta0[j];
            s_fd[j] = (fp - fm) / (2.0 * eps);
            h_fd.set_column(j, &((sp - sm) / (2.0 * eps)));
        }
        work.set_beta(b, &beta0)?;
        let score_error = (&s - &s_fd).amax() / s_fd.amax().max(1.0);
        let hessian_error = (&h - &h_fd).norm() / h_fd.norm().max(1.0);
        let asymmetry = (&h - h.transpose()).amax();
        out.push(FdReport {
            block: b,
            label: state.block(b).label(),
            score_error,
            hessian_error,
            asymmetry,
            score_pass: score_error < tol.score,
            hessian_pass: hessian_error < tol.hessian && asymmetry < 1e-8,
        });
    }
    Ok(out)
}
