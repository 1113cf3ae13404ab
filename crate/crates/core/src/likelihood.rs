//! Survival and longitudinal log-likelihoods, priors and the log-posterior.

use crate::model::{BlockPrior, DesignBlock, ModelState, Predictor, VAGUE_PRIOR_VARIANCE};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;
use thiserror::Error;

/// Shape and scale of the inverse-Gamma hyperprior on every variance.
pub const IG_A: f64 = 0.001;
pub const IG_B: f64 = 0.001;

/// Exponents are capped here before `exp` so a diverged state saturates
/// instead of producing infinities.
pub const EXP_CAP: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("quadrature needs at least 2 nodes (got {0})")]
    TooFewNodes(usize),
    #[error("follow-up time {0} must be positive and finite")]
    BadFollowUp(f64),
    #[error("variance parameter must be positive (got {0})")]
    NonPositiveVariance(f64),
}

/// Per-subject trapezoid nodes on `[0, T_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    q: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// `q` equally spaced nodes per subject; the last node is exactly `T_i`.
    pub fn new(follow_up: &[f64], q: usize) -> Result<Self, LikelihoodError> {
        if q < 2 {
            return Err(LikelihoodError::TooFewNodes(q));
        }
        let mut nodes = Vec::with_capacity(follow_up.len() * q);
        let mut weights = Vec::with_capacity(follow_up.len() * q);
        for &t in follow_up {
            if !(t.is_finite() && t > 0.0) {
                return Err(LikelihoodError::BadFollowUp(t));
            }
            let h = t / (q - 1) as f64;
            for j in 0..q {
                nodes.push(if j == q - 1 { t } else { h * j as f64 });
                weights.push(if j == 0 || j == q - 1 { 0.5 * h } else { h });
            }
        }
        Ok(Self { q, nodes, weights })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_subjects(&self) -> usize {
        self.nodes.len() / self.q
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.q..(i + 1) * self.q]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i * self.q..(i + 1) * self.q]
    }

    pub fn all_weights(&self) -> &[f64] {
        &self.weights
    }
}

#[inline]
pub(crate) fn capped_exp(x: f64) -> (f64, bool) {
    if x > EXP_CAP {
        (EXP_CAP.exp(), true)
    } else {
        (x.exp(), false)
    }
}

/// Hazard integrand `ω_iq = exp(η_λ + η_α η_μ)` at every quadrature node and
/// `exp(η_γ)` per subject, with saturation flags.
pub(crate) struct HazardTerms {
    pub omega: Vec<f64>,
    pub exp_gamma: Vec<f64>,
    pub saturated: Vec<bool>,
}

pub(crate) fn hazard_terms(state: &ModelState) -> HazardTerms {
    let l = &state.eta(Predictor::Lambda).quad;
    let a = &state.eta(Predictor::Alpha).quad;
    let m = &state.eta(Predictor::Mu).quad;
    let g = &state.eta(Predictor::Gamma).surv;
    let q = state.quad().q();
    let n = g.len();
    let mut saturated = vec![false; n];
    let mut omega = Vec::with_capacity(l.len());
    for (r, ((lv, av), mv)) in l.iter().zip(a).zip(m).enumerate() {
        let (v, s) = capped_exp(lv + av * mv);
        if s {
            saturated[r / q] = true;
        }
        omega.push(v);
    }
    let exp_gamma = g
        .iter()
        .enumerate()
        .map(|(i, gv)| {
            let (v, s) = capped_exp(*gv);
            if s {
                saturated[i] = true;
            }
            v
        })
        .collect();
    HazardTerms {
        omega,
        exp_gamma,
        saturated,
    }
}

/// `Λ_i(T_i)` for every subject.
pub fn cumulative_hazards(state: &ModelState) -> Vec<f64> {
    let h = hazard_terms(state);
    let q = state.quad().q();
    let w = state.quad().all_weights();
    let n = h.exp_gamma.len();
    let flagged = h.saturated.iter().filter(|&&s| s).count();
    if flagged > 0 {
        log::warn!("hazard saturated for {flagged} subject(s); the state has likely diverged");
    }
    (0..n)
        .map(|i| {
            let s: f64 = (i * q..(i + 1) * q).map(|r| w[r] * h.omega[r]).sum();
            h.exp_gamma[i] * s
        })
        .collect()
}

/// Cumulative hazard of subject `i`,
/// `exp(η_γi) Σ_q w_q exp(η_λi(u_q) + η_αi(u_q) η_μi(u_q))`.
pub fn cumulative_hazard(state: &ModelState, i: usize) -> f64 {
    let q = state.quad().q();
    let r = i * q..(i + 1) * q;
    let l = &state.eta(Predictor::Lambda).quad[r.clone()];
    let a = &state.eta(Predictor::Alpha).quad[r.clone()];
    let m = &state.eta(Predictor::Mu).quad[r];
    let w = state.quad().weights(i);
    let mut saturated = false;
    let mut s = 0.0;
    for j in 0..q {
        let (v, sat) = capped_exp(l[j] + a[j] * m[j]);
        saturated |= sat;
        s += w[j] * v;
    }
    let (eg, sat) = capped_exp(state.eta(Predictor::Gamma).surv[i]);
    if saturated || sat {
        log::warn!("hazard saturated for subject {}", state.data().subjects()[i].id);
    }
    eg * s
}

/// Full predictor `η_i(T_i) = η_λ + η_γ + η_α η_μ` at the follow-up times.
pub fn survival_predictor(state: &ModelState) -> Vec<f64> {
    let l = &state.eta(Predictor::Lambda).surv;
    let g = &state.eta(Predictor::Gamma).surv;
    let a = &state.eta(Predictor::Alpha).surv;
    let m = &state.eta(Predictor::Mu).surv;
    (0..l.len()).map(|i| l[i] + g[i] + a[i] * m[i]).collect()
}

/// `δᵀη(T) − Σ_i Λ_i`.
pub fn loglik_surv(state: &ModelState) -> f64 {
    let eta = survival_predictor(state);
    let lam = cumulative_hazards(state);
    state
        .data()
        .subjects()
        .iter()
        .zip(eta.iter().zip(&lam))
        .map(|(s, (e, l))| if s.event { e - l } else { -l })
        .sum()
}

/// Gaussian log-likelihood with `R = diag(exp(η_σ)²)`.
pub fn loglik_long(state: &ModelState) -> f64 {
    let mu = &state.eta(Predictor::Mu).long;
    let sg = &state.eta(Predictor::Sigma).long;
    let n = mu.len() as f64;
    let mut s = -0.5 * n * (2.0 * PI).ln();
    for ((r, m), lsd) in state.data().records().iter().zip(mu).zip(sg) {
        let res = r.y - m;
        s -= lsd + 0.5 * res * res * (-2.0 * lsd).exp();
    }
    s
}

/// Survival plus longitudinal log-likelihood contribution of every subject.
pub fn subject_loglik(state: &ModelState) -> Vec<f64> {
    let eta = survival_predictor(state);
    let lam = cumulative_hazards(state);
    let mu = &state.eta(Predictor::Mu).long;
    let sg = &state.eta(Predictor::Sigma).long;
    let c = 0.5 * (2.0 * PI).ln();
    let data = state.data();
    (0..data.n())
        .map(|i| {
            let mut s = if data.subjects()[i].event { eta[i] } else { 0.0 } - lam[i];
            for j in data.subject_range(i) {
                let res = data.records()[j].y - mu[j];
                s -= c + sg[j] + 0.5 * res * res * (-2.0 * sg[j]).exp();
            }
            s
        })
        .collect()
}

/// Log density of the inverse-Gamma distribution with shape `a`, scale `b`.
pub fn inv_gamma_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// Log prior of one block's coefficients and variances.
///
/// Unpenalized blocks carry independent `N(0, 1000²)` priors. Isotropic
/// blocks contribute `(rank K / 2) log(1/τ²) − βᵀKβ / (2τ²)`, anisotropic
/// blocks `½ log|P(τ²)|₊ − ½ βᵀP(τ²)β`, each plus the inverse-Gamma
/// hyperprior of every variance.
pub fn log_prior(block: &DesignBlock) -> Result<f64, LikelihoodError> {
    if let Some(&bad) = block.tau2.iter().find(|&&v| !(v > 0.0)) {
        return Err(LikelihoodError::NonPositiveVariance(bad));
    }
    let beta = &block.beta;
    let prior = &block.design.prior;
    let hyper: f64 = block.tau2.iter().map(|&t| inv_gamma_log_pdf(t, IG_A, IG_B)).sum();
    Ok(match prior {
        BlockPrior::Vague => {
            let c = -0.5 * (2.0 * PI * VAGUE_PRIOR_VARIANCE).ln();
            beta.iter().map(|b| c - 0.5 * b * b / VAGUE_PRIOR_VARIANCE).sum()
        }
        BlockPrior::Isotropic { rank, .. } => {
            let q = prior.quad_forms(beta)[0];
            let t = block.tau2[0];
            0.5 * *rank as f64 * (1.0 / t).ln() - 0.5 * q / t + hyper
        }
        BlockPrior::Anisotropic { .. } => {
            let q = prior.quad_forms(beta);
            0.5 * prior.anisotropic_log_det(&block.tau2)
                - 0.5 * (q[0] / block.tau2[0] + q[1] / block.tau2[1])
                + hyper
        }
    })
}

/// The parts of the log-posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogPosteriorValue {
    pub loglik_surv: f64,
    pub loglik_long: f64,
    pub log_prior: f64,
    pub total: f64,
}

pub fn log_prior_total(state: &ModelState) -> Result<f64, LikelihoodError> {
    state.blocks().iter().map(log_prior).sum()
}

pub fn log_posterior(state: &ModelState) -> Result<LogPosteriorValue, LikelihoodError> {
    let loglik_surv = loglik_surv(state);
    let loglik_long = loglik_long(state);
    let log_prior = log_prior_total(state)?;
    Ok(LogPosteriorValue {
        loglik_surv,
        loglik_long,
        log_prior,
        total: loglik_surv + loglik_long + log_prior,
    })
}
