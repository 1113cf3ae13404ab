//! Posterior mode by blockwise Newton-Raphson with a steplength grid and
//! AICc-driven selection of the variance parameters.

use crate::derivatives::{add_prior, loglik_derivatives, Curvature, DerivativeError, Derivatives};
use crate::likelihood::{log_posterior, loglik_long, loglik_surv, LikelihoodError};
use crate::linalg::cholesky_with_ridge;
use crate::model::{ModelError, ModelSpec, ModelState, Predictor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModeError {
    #[error("steplength must lie in (0, 1] (got {0})")]
    InvalidSteplength(f64),
    #[error("block {0} is unpenalized; there is no variance parameter to select")]
    Unpenalized(usize),
    #[error("log-posterior is not finite at the starting values")]
    NonFiniteStart,
    #[error(transparent)]
    Derivative(#[from] DerivativeError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which log-likelihood scores a variance candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AiccLikelihood {
    /// Longitudinal plus survival log-likelihood.
    Full,
    /// The submodel matching the sample size: longitudinal for μ and σ
    /// blocks, survival for λ, γ and α blocks.
    Submodel,
}

/// Which effective degrees of freedom enter the AICc of a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdfScope {
    /// Only the block being updated.
    Block,
    /// The block's candidate edf plus the current edf of all other blocks.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeConfig {
    /// Convergence threshold on the absolute change of the log-posterior.
    pub tol: f64,
    pub max_sweeps: usize,
    pub steplengths: Vec<f64>,
    /// Log-spaced τ² search: `tau2_points` values on `[tau2_min, tau2_max]`,
    /// refined once around the best value.
    pub tau2_min: f64,
    pub tau2_max: f64,
    pub tau2_points: usize,
    pub refine_points: usize,
    pub update_tau2: bool,
    pub edf_scope: EdfScope,
    pub aicc_likelihood: AiccLikelihood,
    /// Fit the longitudinal, then the survival blocks alone before cycling
    /// over all blocks.
    pub warm_start: bool,
}

impl Default for ModeConfig {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_sweeps: 200,
            steplengths: vec![1.0, 0.5, 0.25, 0.1, 0.05, 0.01],
            tau2_min: 1e-4,
            tau2_max: 1e4,
            tau2_points: 15,
            refine_points: 7,
            update_tau2: true,
            edf_scope: EdfScope::Block,
            aicc_likelihood: AiccLikelihood::Submodel,
            warm_start: true,
        }
    }
}

/// Factor `−H` (per group for factorized blocks) with the ridge fallback.
pub(crate) enum NegHessFactor {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Grouped(Vec<(std::ops::Range<usize>, nalgebra::Cholesky<f64, nalgebra::Dyn>)>),
}

impl NegHessFactor {
    /// `None` if some factor fails even after the ridge.
    pub(crate) fn new(h: &Curvature) -> Option<(Self, bool)> {
        match h {
            Curvature::Dense(m) => {
                let (c, ridge) = cholesky_with_ridge(&(-m))?;
                Some((NegHessFactor::Dense(c), ridge > 0.0))
            }
            Curvature::Grouped { ranges, blocks } => {
                let mut out = Vec::with_capacity(ranges.len());
                let mut any = false;
                for (r, m) in ranges.iter().zip(blocks) {
                    let (c, ridge) = cholesky_with_ridge(&(-m))?;
                    any |= ridge > 0.0;
                    out.push((r.clone(), c));
                }
                Some((NegHessFactor::Grouped(out), any))
            }
        }
    }

    pub(crate) fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            NegHessFactor::Dense(c) => c.solve(rhs),
            NegHessFactor::Grouped(g) => {
                let mut out = DVector::zeros(rhs.len());
                for (r, c) in g {
                    let x = c.solve(&rhs.rows(r.start, r.len()).into_owned());
                    out.rows_mut(r.start, r.len()).copy_from(&x);
                }
                out
            }
        }
    }

    /// Dense `(−H)⁻¹`.
    pub(crate) fn inverse(&self, p: usize) -> DMatrix<f64> {
        match self {
            NegHessFactor::Dense(c) => c.inverse(),
            NegHessFactor::Grouped(g) => {
                let mut out = DMatrix::zeros(p, p);
                for (r, c) in g {
                    out.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(&c.inverse());
                }
                out
            }
        }
    }
}

/// Newton direction `(−H)⁻¹ s`, falling back to a scaled gradient when the
/// regularized Hessian cannot be factored (second value `true`).
fn newton_direction(d: &Derivatives) -> (DVector<f64>, bool) {
    match NegHessFactor::new(&d.hessian) {
        Some((f, _)) => (f.solve(&d.score), false),
        None => {
            let scale = match &d.hessian {
                Curvature::Dense(m) => m.diagonal().amax(),
                Curvature::Grouped { blocks, .. } => {
                    blocks.iter().map(|m| m.diagonal().amax()).fold(0.0, f64::max)
                }
            };
            let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
            log::warn!("Hessian not invertible after regularization; using a gradient step");
            (&d.score / scale, true)
        }
    }
}

/// Candidate `β⁺ = β − ν H⁻¹ s` for block `b` (state unchanged).
///
/// Second value flags the scaled-gradient fallback.
pub fn newton_update(state: &ModelState, b: usize, nu: f64) -> Result<(Vec<f64>, bool), ModeError> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(ModeError::InvalidSteplength(nu));
    }
    let d = crate::derivatives::derivatives(state, b)?;
    let (dir, fallback) = newton_direction(&d);
    let beta = &state.block(b).beta;
    Ok((beta.iter().zip(dir.iter()).map(|(x, v)| x + nu * v).collect(), fallback))
}

/// Outcome of the steplength search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub nu: f64,
    pub logpost: f64,
    /// No candidate improved the log-posterior; β was left unchanged.
    pub stalled: bool,
}

/// Tries every steplength on `direction`, keeps the best improving one (or
/// none, flagging a stall) and leaves the state at the chosen coefficients.
pub fn optimize_steplength(
    state: &mut ModelState,
    b: usize,
    direction: &DVector<f64>,
    steplengths: &[f64],
) -> Result<StepResult, ModeError> {
    let beta0 = state.block(b).beta.clone();
    let current = log_posterior(state)?.total;
    let mut best = StepResult {
        nu: 0.0,
        logpost: current,
        stalled: true,
    };
    if direction.iter().all(|v| *v == 0.0) {
        return Ok(best);
    }
    for &nu in steplengths {
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(ModeError::InvalidSteplength(nu));
        }
        let cand: Vec<f64> = beta0.iter().zip(direction.iter()).map(|(x, v)| x + nu * v).collect();
        state.set_beta(b, &cand)?;
        let lp = log_posterior(state)?.total;
        if lp.is_finite() && lp > best.logpost {
            best = StepResult {
                nu,
                logpost: lp,
                stalled: false,
            };
        }
    }
    if best.stalled {
        state.set_beta(b, &beta0)?;
    } else {
        let cand: Vec<f64> = beta0.iter().zip(direction.iter()).map(|(x, v)| x + best.nu * v).collect();
        state.set_beta(b, &cand)?;
    }
    Ok(best)
}

/// Selected variances with their criterion value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tau2Choice {
    pub tau2: Vec<f64>,
    pub aicc: f64,
    pub edf: f64,
}

/// Sample size entering the AICc of a block of predictor `k`.
pub fn aicc_sample_size(state: &ModelState, k: Predictor) -> usize {
    match k {
        Predictor::Mu | Predictor::Sigma => state.data().n_obs(),
        _ => state.data().n(),
    }
}

pub(crate) fn log_spaced(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..m).map(|j| (a + (b - a) * j as f64 / (m - 1) as f64).exp()).collect()
}

struct AiccContext<'a> {
    lik: &'a Derivatives,
    likelihood: AiccLikelihood,
    n_k: f64,
    other_edf: f64,
}

/// Evaluates the AICc of block `b` at variances `tau2`: one Newton step
/// from the current β with the candidate penalty, full log-likelihood at
/// the refitted β, `edf = tr[(F + P)⁻¹ F]` with `F = −H_lik`.
fn aicc_at(state: &mut ModelState, b: usize, tau2: &[f64], ctx: &AiccContext) -> Result<Option<(f64, f64)>, ModeError> {
    let blk = state.block(b);
    let prior = blk.design.prior.clone();
    let beta0 = blk.beta.clone();
    let p = beta0.len();
    let pb = prior.precision_times(tau2, &beta0);
    let rhs = &ctx.lik.score - &pb;
    let mut delta = DVector::zeros(p);
    let mut edf = 0.0;
    match &ctx.lik.hessian {
        Curvature::Dense(h) => {
            let f = -h;
            let a = &f + prior.precision(p, tau2);
            let Some((c, _)) = cholesky_with_ridge(&a) else { return Ok(None) };
            delta = c.solve(&rhs);
            edf = c.solve(&f).trace();
        }
        Curvature::Grouped { ranges, blocks } => {
            for (r, h) in ranges.iter().zip(blocks) {
                let f = -h;
                let a = &f + prior.group_precision(r.clone(), tau2);
                let Some((c, _)) = cholesky_with_ridge(&a) else { return Ok(None) };
                let x = c.solve(&rhs.rows(r.start, r.len()).into_owned());
                delta.rows_mut(r.start, r.len()).copy_from(&x);
                edf += c.solve(&f).trace();
            }
        }
    }
    let total_edf = edf + ctx.other_edf;
    if total_edf >= ctx.n_k - 1.0 {
        return Ok(None);
    }
    let cand: Vec<f64> = beta0.iter().zip(delta.iter()).map(|(x, d)| x + d).collect();
    state.set_beta(b, &cand)?;
    let ll = match (ctx.likelihood, state.block(b).predictor()) {
        (AiccLikelihood::Full, _) => loglik_surv(state) + loglik_long(state),
        (AiccLikelihood::Submodel, Predictor::Mu | Predictor::Sigma) => loglik_long(state),
        (AiccLikelihood::Submodel, _) => loglik_surv(state),
    };
    state.set_beta(b, &beta0)?;
    if !ll.is_finite() {
        return Ok(None);
    }
    let aicc = -2.0 * ll + 2.0 * total_edf * ctx.n_k / (ctx.n_k - total_edf - 1.0);
    Ok(Some((aicc, edf)))
}

fn search_coordinate(
    state: &mut ModelState,
    b: usize,
    tau2: &mut [f64],
    coord: usize,
    config: &ModeConfig,
    ctx: &AiccContext,
) -> Result<Option<(f64, f64)>, ModeError> {
    let grid = log_spaced(config.tau2_min, config.tau2_max, config.tau2_points);
    let mut best: Option<(f64, f64, f64)> = None; // (aicc, edf, value)
    let mut best_idx = 0;
    for (j, &v) in grid.iter().enumerate() {
        tau2[coord] = v;
        if let Some((a, e)) = aicc_at(state, b, tau2, ctx)? {
            if best.is_none_or(|(ba, _, _)| a < ba) {
                best = Some((a, e, v));
                best_idx = j;
            }
        }
    }
    let Some(mut found) = best else { return Ok(None) };
    if config.refine_points > 0 && grid.len() > 1 {
        let lo = grid[best_idx.saturating_sub(1)];
        let hi = grid[(best_idx + 1).min(grid.len() - 1)];
        for v in log_spaced(lo, hi, config.refine_points + 2) {
            tau2[coord] = v;
            if let Some((a, e)) = aicc_at(state, b, tau2, ctx)? {
                if a < found.0 {
                    found = (a, e, v);
                }
            }
        }
    }
    tau2[coord] = found.2;
    Ok(Some((found.0, found.1)))
}

/// Selects the variances of penalized block `b` by minimizing the AICc;
/// anisotropic blocks are searched one coordinate at a time. The state's
/// variances are updated; coefficients are left unchanged.
pub fn update_tau2_aicc(state: &mut ModelState, b: usize, config: &ModeConfig) -> Result<Tau2Choice, ModeError> {
    let lik = loglik_derivatives(state, b)?;
    update_tau2_with(state, b, config, &lik, 0.0)
}

fn update_tau2_with(
    state: &mut ModelState,
    b: usize,
    config: &ModeConfig,
    lik: &Derivatives,
    other_edf: f64,
) -> Result<Tau2Choice, ModeError> {
    let blk = state.block(b);
    if !blk.design.is_penalized() {
        return Err(ModeError::Unpenalized(b));
    }
    let ctx = AiccContext {
        lik,
        likelihood: config.aicc_likelihood,
        n_k: aicc_sample_size(state, blk.predictor()) as f64,
        other_edf,
    };
    let mut tau2 = blk.tau2.clone();
    let start = tau2.clone();
    let mut result = None;
    for coord in 0..tau2.len() {
        match search_coordinate(state, b, &mut tau2, coord, config, &ctx)? {
            Some(r) => result = Some(r),
            None => tau2[coord] = start[coord],
        }
    }
    let (aicc, edf) = match result {
        Some(r) => r,
        None => {
            log::warn!("{}: no admissible variance candidate; keeping τ²", state.block(b).label());
            (f64::NAN, f64::NAN)
        }
    };
    state.set_tau2(b, &tau2)?;
    Ok(Tau2Choice { tau2, aicc, edf })
}

/// Which blocks a sweep visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Warm start: μ and σ blocks only, association held at its start value.
    Longitudinal,
    /// Warm start: λ, γ and α blocks only, marker trajectories held fixed.
    Survival,
    /// All blocks.
    Joint,
}

impl Stage {
    fn includes(self, k: Predictor) -> bool {
        match self {
            Stage::Longitudinal => matches!(k, Predictor::Mu | Predictor::Sigma),
            Stage::Survival => matches!(k, Predictor::Lambda | Predictor::Gamma | Predictor::Alpha),
            Stage::Joint => true,
        }
    }
}

/// One record of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub stage: Stage,
    pub sweep: usize,
    pub logpost: f64,
    pub tau2_changed: bool,
    /// Chosen steplength per visited block (0 when stalled).
    pub steplengths: Vec<f64>,
    pub stalled: Vec<bool>,
}

/// Result of the posterior-mode fit.
#[derive(Debug, Clone)]
pub struct ModeFit {
    pub state: ModelState,
    /// `[−H(β̂_b)]⁻¹` per block.
    pub covariances: Vec<DMatrix<f64>>,
    pub edf: Vec<f64>,
    pub trace: Vec<SweepRecord>,
    pub converged: bool,
    /// Sweeps over all blocks (warm-start sweeps excluded).
    pub sweeps: usize,
    /// Number of Newton steps that fell back to a gradient step.
    pub gradient_fallbacks: usize,
}

impl ModeFit {
    /// `β̂ ± 1.96 sd` per coefficient of block `b`.
    pub fn intervals(&self, b: usize) -> Vec<(f64, f64, f64)> {
        let beta = &self.state.block(b).beta;
        let c = &self.covariances[b];
        beta.iter()
            .enumerate()
            .map(|(j, &v)| {
                let sd = c[(j, j)].max(0.0).sqrt();
                (v, v - 1.96 * sd, v + 1.96 * sd)
            })
            .collect()
    }

    pub fn logpost(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.logpost)
    }
}

/// Build the model and run [`fit_mode_state`] from the default start.
pub fn fit_mode(spec: &ModelSpec, data: crate::model::JointData, q: usize, config: &ModeConfig) -> Result<ModeFit, ModeError> {
    let state = ModelState::new(spec, data, q)?;
    fit_mode_state(state, config)
}

struct Sweeper<'a> {
    config: &'a ModeConfig,
    edf: Vec<f64>,
    fallbacks: usize,
}

impl Sweeper<'_> {
    /// One pass over the blocks of `stage`: τ² by AICc, then a Newton step.
    fn sweep(&mut self, state: &mut ModelState, stage: Stage) -> Result<(bool, Vec<f64>, Vec<bool>), ModeError> {
        let config = self.config;
        let mut tau2_changed = false;
        let mut steps = Vec::new();
        let mut stalled = Vec::new();
        for b in 0..state.n_blocks() {
            if !stage.includes(state.block(b).predictor()) {
                continue;
            }
            let lik = loglik_derivatives(state, b)?;
            if config.update_tau2 && state.block(b).design.is_penalized() {
                let before = state.block(b).tau2.clone();
                let other = match config.edf_scope {
                    EdfScope::Block => 0.0,
                    EdfScope::Model => self.edf.iter().enumerate().filter(|(j, _)| *j != b).map(|(_, v)| v).sum(),
                };
                let choice = update_tau2_with(state, b, config, &lik, other)?;
                if choice.edf.is_finite() {
                    self.edf[b] = choice.edf;
                }
                tau2_changed |= before
                    .iter()
                    .zip(&choice.tau2)
                    .any(|(a, c)| (a - c).abs() > 1e-12 * a.abs());
            }
            let post = add_prior(state, b, lik);
            let (dir, fb) = newton_direction(&post);
            if fb {
                self.fallbacks += 1;
            }
            let step = optimize_steplength(state, b, &dir, &config.steplengths)?;
            steps.push(step.nu);
            stalled.push(step.stalled);
        }
        Ok((tau2_changed, steps, stalled))
    }

    /// Sweeps `stage` until the log-posterior settles with unchanged
    /// variances; returns whether that happened within `max_sweeps`.
    fn run(&mut self, state: &mut ModelState, stage: Stage, trace: &mut Vec<SweepRecord>) -> Result<(bool, usize), ModeError> {
        let config = self.config;
        let mut lp = log_posterior(state)?.total;
        let mut sweeps = 0;
        while sweeps < config.max_sweeps {
            sweeps += 1;
            let (tau2_changed, steplengths, stalled) = self.sweep(state, stage)?;
            let new_lp = log_posterior(state)?.total;
            let delta = (new_lp - lp).abs();
            lp = new_lp;
            log::debug!("{stage:?} sweep {sweeps}: log-posterior {lp:.6}, τ² changed: {tau2_changed}");
            trace.push(SweepRecord {
                stage,
                sweep: sweeps,
                logpost: lp,
                tau2_changed,
                steplengths,
                stalled,
            });
            if !config.tol.is_finite() {
                return Ok((false, sweeps));
            }
            if delta < config.tol && !tau2_changed {
                return Ok((true, sweeps));
            }
        }
        Ok((false, sweeps))
    }
}

/// Blockwise Newton-Raphson from the given state: for every block in
/// order, select τ² by AICc (penalized blocks), then take the best Newton
/// step from the steplength grid. Stops once the log-posterior changes by
/// less than `tol` in a sweep that left all variances unchanged.
///
/// With `warm_start`, the longitudinal blocks are first fitted alone and
/// then the survival blocks given the marker fit. Starting the full cycle
/// from a constant marker would leave the association confounded with the
/// survival intercept and can lock the fit into a spurious mode.
pub fn fit_mode_state(mut state: ModelState, config: &ModeConfig) -> Result<ModeFit, ModeError> {
    if !log_posterior(&state)?.total.is_finite() {
        return Err(ModeError::NonFiniteStart);
    }
    let nb = state.n_blocks();
    let mut sweeper = Sweeper {
        config,
        edf: vec![0.0; nb],
        fallbacks: 0,
    };
    let mut trace = Vec::new();
    if config.warm_start {
        for stage in [Stage::Longitudinal, Stage::Survival] {
            sweeper.run(&mut state, stage, &mut trace)?;
        }
    }
    let (converged, sweeps) = sweeper.run(&mut state, Stage::Joint, &mut trace)?;
    if !converged {
        log::warn!("posterior mode not converged after {sweeps} sweep(s)");
    }
    let mut edf = sweeper.edf;
    let mut covariances = Vec::with_capacity(nb);
    for b in 0..nb {
        let d = crate::derivatives::derivatives(&state, b)?;
        let p = state.block(b).n_coef();
        let cov = match NegHessFactor::new(&d.hessian) {
            Some((f, _)) => f.inverse(p),
            None => DMatrix::from_element(p, p, f64::NAN),
        };
        covariances.push(cov);
        if !state.block(b).design.is_penalized() {
            edf[b] = p as f64;
        }
    }
    Ok(ModeFit {
        state,
        covariances,
        edf,
        trace,
        converged,
        sweeps,
        gradient_fallbacks: sweeper.fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LongRecord, SplineSettings, SubjectRecord, TermKind, TermSpec};
    use crate::JointData;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeMap;

    fn subject(id: usize, time: f64, event: bool, x: f64) -> SubjectRecord {
        SubjectRecord {
            id: id.to_string(),
            time,
            event,
            covariates: BTreeMap::from([("x1".to_string(), x)]),
        }
    }

    fn intercepts() -> Vec<TermSpec> {
        vec![
            TermSpec::new(Predictor::Mu, TermKind::Intercept),
            TermSpec::new(Predictor::Sigma, TermKind::Intercept),
        ]
    }

    /// One subject, Gaussian marker, no association: the μ block is exactly quadratic.
    fn quadratic_toy() -> ModelState {
        let ys = [1.3, 0.2, 2.5, 1.9, 0.7];
        let records = ys
            .iter()
            .enumerate()
            .map(|(j, &y)| LongRecord { subject: 0, time: j as f64, y })
            .collect();
        let data = JointData::new(vec![subject(1, 5.0, true, 0.0)], records).unwrap();
        ModelState::new(&ModelSpec::new(intercepts()), data, 25).unwrap()
    }

    #[test]
    fn newton_reaches_quadratic_optimum() {
        let mut state = quadratic_toy();
        let b = state.blocks_of(Predictor::Mu)[0];
        state.set_beta(b, &[-40.0]).unwrap();
        let s2 = state.error_variance()[0];
        let y = state.data().responses();
        // argmax of −Σ(y−β)²/(2σ²) − β²/(2·1e6)
        let exact = y.iter().sum::<f64>() / s2 / (y.len() as f64 / s2 + 1e-6);
        let mut iters = 0;
        while (state.block(b).beta[0] - exact).abs() > 1e-8 {
            let (beta, fb) = newton_update(&state, b, 1.0).unwrap();
            assert!(!fb);
            state.set_beta(b, &beta).unwrap();
            iters += 1;
            assert!(iters <= 3, "not converged after 3 iterations");
        }
        // stationary point: the update leaves β unchanged
        let (beta, _) = newton_update(&state, b, 1.0).unwrap();
        assert!((beta[0] - state.block(b).beta[0]).abs() < 1e-10);
    }

    #[test]
    fn zero_steplength_rejected() {
        let state = quadratic_toy();
        assert!(matches!(newton_update(&state, 0, 0.0), Err(ModeError::InvalidSteplength(_))));
    }

    #[test]
    fn steplength_one_on_quadratic_and_stall_on_zero_direction() {
        let mut state = quadratic_toy();
        let b = state.blocks_of(Predictor::Mu)[0];
        let d = crate::derivatives::derivatives(&state, b).unwrap();
        let (dir, _) = newton_direction(&d);
        let grid = ModeConfig::default().steplengths;
        let r = optimize_steplength(&mut state, b, &dir, &grid).unwrap();
        assert_eq!(r.nu, 1.0);
        assert!(!r.stalled);
        let before = state.block(b).beta.clone();
        let r = optimize_steplength(&mut state, b, &DVector::zeros(1), &grid).unwrap();
        assert!(r.stalled);
        assert_eq!(state.block(b).beta, before);
    }

    #[test]
    fn overshooting_direction_gets_shortened() {
        // γ-only survival toy: ℓ(γ) = dγ − e^γ ΣT, far below its optimum
        let subjects: Vec<_> = (0..20).map(|i| subject(i, 1.0 + i as f64, i % 2 == 0, 0.0)).collect();
        let data = JointData::new(subjects, vec![]).unwrap();
        let spec = ModelSpec::new(vec![TermSpec::new(Predictor::Gamma, TermKind::Intercept)]);
        let mut state = ModelState::new(&spec, data, 25).unwrap();
        let opt = (10.0f64 / 210.0).ln();
        state.set_beta(0, &[opt - 6.0]).unwrap();
        let lp0 = log_posterior(&state).unwrap().total;
        let d = crate::derivatives::derivatives(&state, 0).unwrap();
        let (dir, _) = newton_direction(&d);
        assert!(dir[0] > 6.0, "direction should overshoot");
        let r = optimize_steplength(&mut state, 0, &dir, &ModeConfig::default().steplengths).unwrap();
        assert!(r.nu < 1.0);
        assert!(r.logpost > lp0);
        assert_eq!(log_posterior(&state).unwrap().total, r.logpost);
    }

    fn smooth_data(signal: impl Fn(f64) -> f64, noise: f64, seed: u64) -> JointData {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = 200;
        let mut subjects = Vec::new();
        let mut records = Vec::new();
        for i in 0..n {
            let x: f64 = rng.random_range(-3.0..3.0);
            subjects.push(subject(i, 10.0, false, x));
            let e: f64 = rng.sample(StandardNormal);
            records.push(LongRecord {
                subject: i,
                time: 1.0,
                y: signal(x) + noise * e,
            });
        }
        JointData::new(subjects, records).unwrap()
    }

    fn smooth_spec() -> ModelSpec {
        let mut t = intercepts();
        t.push(TermSpec::new(
            Predictor::Mu,
            TermKind::Smooth {
                covariate: "x1".into(),
                spline: SplineSettings::cubic(12),
            },
        ));
        ModelSpec::new(t)
    }

    fn smooth_block(fit: &ModeFit) -> usize {
        (0..fit.state.n_blocks()).find(|&b| fit.state.block(b).label() == "mu:s(x1)").unwrap()
    }

    #[test]
    fn aicc_penalizes_noise_fully() {
        let fit = fit_mode(&smooth_spec(), smooth_data(|_| 0.0, 1.0, 3), 25, &ModeConfig::default()).unwrap();
        let b = smooth_block(&fit);
        assert!(fit.edf[b] < 3.0, "edf {}", fit.edf[b]);
        assert!(fit.state.block(b).tau2[0] < 1e-2);
    }

    #[test]
    fn aicc_keeps_clear_signal() {
        let fit = fit_mode(&smooth_spec(), smooth_data(|x| (2.0 * x).sin(), 0.1, 4), 25, &ModeConfig::default()).unwrap();
        let b = smooth_block(&fit);
        assert!(fit.state.block(b).tau2[0] > 1e-4);
        assert!(fit.edf[b] > 4.0);
        assert!(fit.converged);
    }

    #[test]
    fn intercept_only_matches_normal_mle() {
        let data = smooth_data(|_| 2.0, 0.7, 5);
        let y = data.responses();
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let fit = fit_mode(&ModelSpec::new(intercepts()), data, 25, &ModeConfig::default()).unwrap();
        assert!(fit.converged);
        let mu = fit.state.block(fit.state.blocks_of(Predictor::Mu)[0]).beta[0];
        let ls = fit.state.block(fit.state.blocks_of(Predictor::Sigma)[0]).beta[0];
        assert!((mu - mean).abs() < 0.02 * mean.abs());
        assert!((ls.exp() - sd).abs() < 0.02 * sd);
        let iv = fit.intervals(fit.state.blocks_of(Predictor::Mu)[0])[0];
        assert!(iv.1 < mu && mu < iv.2);
    }

    #[test]
    fn infinite_tolerance_stops_after_one_sweep() {
        let config = ModeConfig {
            tol: f64::INFINITY,
            ..ModeConfig::default()
        };
        let fit = fit_mode(&smooth_spec(), smooth_data(|x| x, 0.5, 6), 25, &config).unwrap();
        assert_eq!(fit.sweeps, 1);
        assert!(!fit.converged);
    }

    #[test]
    fn trace_ascends_and_fit_is_a_fixed_point() {
        let config = ModeConfig::default();
        let fit = fit_mode(&smooth_spec(), smooth_data(|x| x.cos(), 0.3, 7), 25, &config).unwrap();
        assert!(fit.converged);
        for w in fit.trace.windows(2) {
            if !w[1].tau2_changed {
                assert!(w[1].logpost >= w[0].logpost - 1e-9);
            }
        }
        let before = fit.state.parameters();
        let again = fit_mode_state(fit.state.clone(), &config).unwrap();
        for (a, b) in before.iter().zip(again.state.parameters()) {
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() <= config.tol, "{x} vs {y}");
            }
        }
    }
}
