//! Posterior-mean estimation: derivative-based Metropolis-Hastings for the
//! coefficients, Gibbs or slice updates for the variances, multiple chains
//! and trace export.

use crate::derivatives::{derivatives, Curvature, DerivativeError, Derivatives};
use crate::likelihood::{inv_gamma_log_pdf, log_posterior, log_prior, loglik_long, loglik_surv, subject_loglik, LikelihoodError, IG_A, IG_B};
use crate::linalg::{clamp_spectrum, mvn_draw_prec, mvn_log_density_prec, quantile_sorted};
use crate::mode::ModeFit;
use crate::model::{BlockPrior, DesignBlock, JointData, ModelError, ModelSpec, ModelState};
use crate::predict::{sample_predictions, EvalPoint, Prediction};
use nalgebra::{Cholesky, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Random-number generator used by every chain: ChaCha20 (rand_chacha 0.9),
/// seeded with `seed_from_u64(seed)` and one stream per chain.
pub type ChainRng = ChaCha20Rng;

pub fn chain_rng(seed: u64, chain: usize) -> ChainRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("block {0} has no variance parameter of the requested kind")]
    WrongPrior(usize),
    #[error(
        "aborted at iteration {iteration}: {rate:.0}% of proposals in the last window were non-finite \
         (worst block {block}); current state: {dump}"
    )]
    NonFinite {
        iteration: usize,
        rate: f64,
        block: String,
        dump: String,
    },
    #[error("chain {0} panicked")]
    Panicked(usize),
    #[error(transparent)]
    Derivative(#[from] DerivativeError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How variances are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tau2Method {
    /// Gibbs draws for isotropic blocks, slice sampling for anisotropic ones.
    Auto,
    /// Slice sampling for every penalized block.
    Slice,
    /// Hold all variances at their starting values.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    pub tau2_method: Tau2Method,
    /// Initial slice width on the log-variance scale.
    pub slice_width: f64,
    pub max_doublings: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iter: 23000,
            burn_in: 3000,
            thin: 20,
            seed: 1,
            chains: 1,
            tau2_method: Tau2Method::Auto,
            slice_width: 1.0,
            max_doublings: 100,
        }
    }
}

impl SamplerConfig {
    /// The short desk-scale chain: 4000 iterations, burn-in 1000, thinning 5.
    pub fn short() -> Self {
        Self {
            n_iter: 4000,
            burn_in: 1000,
            thin: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), McmcError> {
        if self.burn_in >= self.n_iter {
            return Err(McmcError::Config(format!(
                "burn-in ({}) must be smaller than the number of iterations ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(McmcError::Config("thinning must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(McmcError::Config("at least one chain is required".into()));
        }
        if !(self.slice_width > 0.0) {
            return Err(McmcError::Config("slice width must be positive".into()));
        }
        Ok(())
    }

    /// Kept draws per chain: iterations `burn_in + thin, burn_in + 2 thin, …`.
    pub fn kept(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    fn keeps(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in).is_multiple_of(self.thin)
    }
}

// ---------------------------------------------------------------------------
// proposals

enum PartKind {
    Taylor(Cholesky<f64, Dyn>),
    RandomWalk(DVector<f64>),
}

/// Independent pieces of a proposal: the whole block, or one subject group.
struct Part {
    range: Range<usize>,
    mean: DVector<f64>,
    kind: PartKind,
}

/// `N(β + (−H)⁻¹ s, (−H)⁻¹)` built from the derivatives at `beta`,
/// part by part.
struct GaussianProposal {
    parts: Vec<Part>,
}

fn taylor_part(range: Range<usize>, beta: &[f64], score: DVector<f64>, neg_h: nalgebra::DMatrix<f64>) -> Part {
    let b = DVector::from_column_slice(&beta[range.clone()]);
    let chol = Cholesky::new(neg_h.clone())
        .or_else(|| clamp_spectrum(&neg_h, 1e-8).and_then(Cholesky::new));
    match chol {
        Some(c) => {
            let mean = &b + c.solve(&score);
            Part {
                range,
                mean,
                kind: PartKind::Taylor(c),
            }
        }
        None => {
            let sd = DVector::from_iterator(
                range.len(),
                neg_h.diagonal().iter().map(|&d| {
                    let d = d.abs();
                    if d.is_finite() && d > 1e-12 { 1.0 / d.sqrt() } else { 1.0 }
                }),
            );
            Part {
                range,
                mean: b,
                kind: PartKind::RandomWalk(sd),
            }
        }
    }
}

impl GaussianProposal {
    fn new(d: &Derivatives, beta: &[f64]) -> Self {
        let parts = match &d.hessian {
            Curvature::Dense(h) => vec![taylor_part(0..beta.len(), beta, d.score.clone(), -h)],
            Curvature::Grouped { ranges, blocks } => ranges
                .iter()
                .zip(blocks)
                .map(|(r, h)| taylor_part(r.clone(), beta, d.score.rows(r.start, r.len()).into_owned(), -h))
                .collect(),
        };
        Self { parts }
    }

    fn random_walk(&self) -> bool {
        self.parts.iter().any(|p| matches!(p.kind, PartKind::RandomWalk(_)))
    }

    fn draw<R: Rng>(&self, p: usize, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; p];
        for part in &self.parts {
            let z = DVector::from_iterator(part.range.len(), (0..part.range.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let x = match &part.kind {
                PartKind::Taylor(c) => mvn_draw_prec(&part.mean, c, &z),
                PartKind::RandomWalk(sd) => &part.mean + sd.component_mul(&z),
            };
            out[part.range.clone()].copy_from_slice(x.as_slice());
        }
        out
    }

    /// Log density of `x` under each part.
    fn log_density(&self, x: &[f64]) -> Vec<f64> {
        self.parts
            .iter()
            .map(|part| {
                let xv = DVector::from_column_slice(&x[part.range.clone()]);
                match &part.kind {
                    PartKind::Taylor(c) => mvn_log_density_prec(&xv, &part.mean, c),
                    PartKind::RandomWalk(sd) => xv
                        .iter()
                        .zip(part.mean.iter())
                        .zip(sd.iter())
                        .map(|((x, m), s)| {
                            let z = (x - m) / s;
                            -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                        })
                        .sum(),
                }
            })
            .collect()
    }
}

/// A proposed coefficient vector with forward `log q(β*|β)` and reverse
/// `log q(β|β*)` densities.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub beta: Vec<f64>,
    pub log_q_forward: f64,
    pub log_q_reverse: f64,
    /// Per-part densities (one entry per subject group for factorized blocks).
    pub part_forward: Vec<f64>,
    pub part_reverse: Vec<f64>,
    /// Some part used the random-walk fallback.
    pub random_walk: bool,
}

/// Draws a Taylor-expansion proposal for block `b`. The reverse density
/// recomputes score and Hessian at the proposal; the state is returned
/// unchanged.
pub fn propose<R: Rng>(state: &mut ModelState, b: usize, rng: &mut R) -> Result<Proposal, McmcError> {
    let beta0 = state.block(b).beta.clone();
    let fwd = GaussianProposal::new(&derivatives(state, b)?, &beta0);
    let beta = fwd.draw(beta0.len(), rng);
    let part_forward = fwd.log_density(&beta);
    state.set_beta(b, &beta)?;
    let rev = derivatives(state, b).map(|d| GaussianProposal::new(&d, &beta));
    state.set_beta(b, &beta0)?;
    let rev = rev?;
    let part_reverse = rev.log_density(&beta0);
    Ok(Proposal {
        log_q_forward: part_forward.iter().sum(),
        log_q_reverse: part_reverse.iter().sum(),
        part_forward,
        part_reverse,
        random_walk: fwd.random_walk() || rev.random_walk(),
        beta,
    })
}

/// `min{0, log π* + log q(β|β*) − log π − log q(β*|β)}`; `−∞` whenever the
/// proposal target or a density is not finite.
pub fn log_acceptance(target_new: f64, target_old: f64, log_q_reverse: f64, log_q_forward: f64) -> f64 {
    let r = target_new + log_q_reverse - target_old - log_q_forward;
    if !target_new.is_finite() || !log_q_reverse.is_finite() || r.is_nan() {
        return f64::NEG_INFINITY;
    }
    r.min(0.0)
}

/// Bookkeeping of one Metropolis-Hastings update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MhOutcome {
    /// Accepted parts (0/1 for ordinary blocks, subject groups otherwise).
    pub accepted: usize,
    pub parts: usize,
    pub non_finite: usize,
    pub random_walk: bool,
}

impl MhOutcome {
    pub fn all_accepted(&self) -> bool {
        self.accepted == self.parts
    }
}

fn group_prior(blk: &DesignBlock, r: &Range<usize>, beta: &[f64]) -> f64 {
    let p = blk.design.prior.group_precision(r.clone(), &blk.tau2);
    let b = DVector::from_column_slice(&beta[r.clone()]);
    -0.5 * b.dot(&(p * &b))
}

fn block_target(state: &ModelState, b: usize) -> Result<f64, McmcError> {
    Ok(loglik_surv(state) + loglik_long(state) + log_prior(state.block(b))?)
}

/// One Metropolis-Hastings update of block `b`. Subject-factorized blocks
/// are proposed jointly and accepted group by group.
pub fn mh_step<R: Rng>(state: &mut ModelState, b: usize, rng: &mut R) -> Result<MhOutcome, McmcError> {
    let groups = state.block(b).design.groups.clone();
    let beta0 = state.block(b).beta.clone();
    let (target0, group0) = match &groups {
        None => (block_target(state, b)?, Vec::new()),
        Some(g) => {
            let sl = subject_loglik(state);
            let blk = state.block(b);
            (0.0, g.iter().enumerate().map(|(i, r)| sl[i] + group_prior(blk, r, &beta0)).collect())
        }
    };
    let prop = propose(state, b, rng)?;
    state.set_beta(b, &prop.beta)?;
    let mut out = MhOutcome {
        parts: prop.part_forward.len(),
        random_walk: prop.random_walk,
        ..MhOutcome::default()
    };
    match &groups {
        None => {
            let t1 = block_target(state, b)?;
            if !t1.is_finite() {
                out.non_finite = 1;
            }
            let la = log_acceptance(t1, target0, prop.log_q_reverse, prop.log_q_forward);
            if accept(la, rng) {
                out.accepted = 1;
            } else {
                state.set_beta(b, &beta0)?;
            }
        }
        Some(g) => {
            let sl = subject_loglik(state);
            let mut beta = prop.beta.clone();
            for (i, r) in g.iter().enumerate() {
                let t1 = sl[i] + group_prior(state.block(b), r, &prop.beta);
                if !t1.is_finite() {
                    out.non_finite += 1;
                }
                let la = log_acceptance(t1, group0[i], prop.part_reverse[i], prop.part_forward[i]);
                if accept(la, rng) {
                    out.accepted += 1;
                } else {
                    beta[r.clone()].copy_from_slice(&beta0[r.clone()]);
                }
            }
            if out.accepted < out.parts {
                state.set_beta(b, &beta)?;
            }
        }
    }
    Ok(out)
}

fn accept<R: Rng>(log_a: f64, rng: &mut R) -> bool {
    if log_a >= 0.0 {
        return true;
    }
    if log_a == f64::NEG_INFINITY {
        return false;
    }
    rng.random::<f64>().ln() < log_a
}

// ---------------------------------------------------------------------------
// variances

/// Result of a variance update; `flagged` marks a clamped quadratic form or
/// an abandoned slice bracket.
#[derive(Debug, Clone, PartialEq)]
pub struct Tau2Draw {
    pub tau2: Vec<f64>,
    pub flagged: bool,
}

/// Draw from `IG(a + rank/2, b + βᵀKβ/2)` for an isotropic prior.
pub fn gibbs_tau2_prior<R: Rng>(prior: &BlockPrior, beta: &[f64], rng: &mut R) -> Result<Tau2Draw, McmcError> {
    let BlockPrior::Isotropic { k, rank } = prior else {
        return Err(McmcError::WrongPrior(0));
    };
    if *rank == 0 {
        return Err(McmcError::WrongPrior(0));
    }
    let bv = DVector::from_column_slice(beta);
    let raw = bv.dot(&(k * &bv));
    let flagged = raw < 0.0;
    let q = raw.max(0.0);
    let shape = IG_A + 0.5 * *rank as f64;
    let rate = IG_B + 0.5 * q;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| McmcError::Config(e.to_string()))?;
    Ok(Tau2Draw {
        tau2: vec![1.0 / g.sample(rng)],
        flagged,
    })
}

/// Gibbs update of an isotropic block's variance.
pub fn gibbs_tau2<R: Rng>(block: &DesignBlock, rng: &mut R) -> Result<Tau2Draw, McmcError> {
    gibbs_tau2_prior(&block.design.prior, &block.beta, rng)
}

/// Full-conditional log density of the variances given the coefficients.
pub fn tau2_log_conditional(prior: &BlockPrior, quad: &[f64], tau2: &[f64]) -> f64 {
    if tau2.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let hyper: f64 = tau2.iter().map(|&t| inv_gamma_log_pdf(t, IG_A, IG_B)).sum();
    match prior {
        BlockPrior::Vague => 0.0,
        BlockPrior::Isotropic { rank, .. } => -0.5 * *rank as f64 * tau2[0].ln() - 0.5 * quad[0] / tau2[0] + hyper,
        BlockPrior::Anisotropic { .. } => {
            0.5 * prior.anisotropic_log_det(tau2) - 0.5 * (quad[0] / tau2[0] + quad[1] / tau2[1]) + hyper
        }
    }
}

/// Univariate slice sampling with doubling and shrinkage. Returns `None`
/// if the bracket did not cover the slice within `max_doublings`.
pub fn slice_sample<R: Rng, F: Fn(f64) -> f64>(x0: f64, g: F, w: f64, max_doublings: usize, rng: &mut R) -> Option<f64> {
    let gx0 = g(x0);
    if !gx0.is_finite() {
        return None;
    }
    let e: f64 = Exp1.sample(rng);
    let y = gx0 - e;
    let u: f64 = rng.random();
    let mut l = x0 - w * u;
    let mut r = l + w;
    let (mut gl, mut gr) = (g(l), g(r));
    let mut k = max_doublings;
    while y < gl || y < gr {
        if k == 0 {
            return None;
        }
        if rng.random::<f64>() < 0.5 {
            l -= r - l;
            gl = g(l);
        } else {
            r += r - l;
            gr = g(r);
        }
        k -= 1;
    }
    let accept = |x1: f64, mut lh: f64, mut rh: f64| {
        let mut differ = false;
        while rh - lh > 1.1 * w {
            let m = 0.5 * (lh + rh);
            if (x0 < m && x1 >= m) || (x0 >= m && x1 < m) {
                differ = true;
            }
            if x1 < m {
                rh = m;
            } else {
                lh = m;
            }
            if differ && y >= g(lh) && y >= g(rh) {
                return false;
            }
        }
        true
    };
    for _ in 0..1000 {
        let x1 = l + rng.random::<f64>() * (r - l);
        if y < g(x1) && accept(x1, l, r) {
            return Some(x1);
        }
        if x1 < x0 {
            l = x1;
        } else {
            r = x1;
        }
    }
    None
}

/// One slice update per variance on the log scale, others held fixed.
pub fn slice_tau2_prior<R: Rng>(
    prior: &BlockPrior,
    beta: &[f64],
    tau2: &[f64],
    width: f64,
    max_doublings: usize,
    rng: &mut R,
) -> Result<Tau2Draw, McmcError> {
    if matches!(prior, BlockPrior::Vague) {
        return Err(McmcError::WrongPrior(0));
    }
    let quad = prior.quad_forms(beta);
    let mut cur = tau2.to_vec();
    let mut flagged = false;
    for j in 0..cur.len() {
        let g = |x: f64| {
            let mut t = cur.clone();
            t[j] = x.exp();
            tau2_log_conditional(prior, &quad, &t) + x
        };
        match slice_sample(cur[j].ln(), g, width, max_doublings, rng) {
            Some(x) => cur[j] = x.exp(),
            None => flagged = true,
        }
    }
    Ok(Tau2Draw { tau2: cur, flagged })
}

/// Slice update of a penalized block's variances.
pub fn slice_tau2<R: Rng>(block: &DesignBlock, config: &SamplerConfig, rng: &mut R) -> Result<Tau2Draw, McmcError> {
    slice_tau2_prior(&block.design.prior, &block.beta, &block.tau2, config.slice_width, config.max_doublings, rng)
}

// ---------------------------------------------------------------------------
// chains

/// Thinned draws of one or more chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub labels: Vec<String>,
    /// `beta[s][b]`: coefficients of block `b` in kept draw `s`.
    pub beta: Vec<Vec<Vec<f64>>>,
    pub tau2: Vec<Vec<Vec<f64>>>,
    /// Chain and iteration of every kept draw.
    pub chain: Vec<usize>,
    pub iteration: Vec<usize>,
    /// Accepted fraction per block over all iterations (subject groups
    /// counted individually), pooled over chains.
    pub acceptance: Vec<f64>,
    /// Log-posterior after every iteration, per chain.
    pub logpost: Vec<Vec<f64>>,
    pub random_walk_steps: Vec<usize>,
    pub flagged_tau2: Vec<usize>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Concatenate chains (in the given order); acceptance rates are
    /// averaged, weighted by iterations.
    pub fn merge(mut parts: Vec<PosteriorSamples>) -> Option<PosteriorSamples> {
        let mut out = parts.drain(..1).next()?;
        let mut weight = out.logpost.iter().map(Vec::len).sum::<usize>() as f64;
        for p in parts {
            let w = p.logpost.iter().map(Vec::len).sum::<usize>() as f64;
            for (a, b) in out.acceptance.iter_mut().zip(&p.acceptance) {
                *a = (*a * weight + b * w) / (weight + w);
            }
            weight += w;
            out.beta.extend(p.beta);
            out.tau2.extend(p.tau2);
            out.chain.extend(p.chain);
            out.iteration.extend(p.iteration);
            out.logpost.extend(p.logpost);
            for (a, b) in out.random_walk_steps.iter_mut().zip(p.random_walk_steps) {
                *a += b;
            }
            for (a, b) in out.flagged_tau2.iter_mut().zip(p.flagged_tau2) {
                *a += b;
            }
        }
        Some(out)
    }

    /// Posterior mean of every block's coefficients.
    pub fn mean_beta(&self) -> Vec<Vec<f64>> {
        let n = self.len().max(1) as f64;
        let mut out: Vec<Vec<f64>> = self.beta.first().map(|d| d.iter().map(|b| vec![0.0; b.len()]).collect()).unwrap_or_default();
        for d in &self.beta {
            for (o, b) in out.iter_mut().zip(d) {
                for (x, v) in o.iter_mut().zip(b) {
                    *x += v / n;
                }
            }
        }
        out
    }

    /// Draws of a single coefficient, in sample order.
    pub fn coefficient(&self, b: usize, j: usize) -> Vec<f64> {
        self.beta.iter().map(|d| d[b][j]).collect()
    }

    /// Draws of a single coefficient split by chain.
    pub fn coefficient_by_chain(&self, b: usize, j: usize) -> Vec<Vec<f64>> {
        let n_chains = self.chain.iter().max().map_or(0, |c| c + 1);
        let mut out = vec![Vec::new(); n_chains];
        for (d, &c) in self.beta.iter().zip(&self.chain) {
            out[c].push(d[b][j]);
        }
        out
    }
}

/// Runs one chain from `state`, using stream `chain` of the seed.
pub fn run_chain_state(mut state: ModelState, config: &SamplerConfig, chain: usize) -> Result<PosteriorSamples, McmcError> {
    config.validate()?;
    let mut rng = chain_rng(config.seed, chain);
    let nb = state.n_blocks();
    let mut samples = PosteriorSamples {
        labels: state.blocks().iter().map(DesignBlock::label).collect(),
        beta: Vec::with_capacity(config.kept()),
        tau2: Vec::with_capacity(config.kept()),
        chain: Vec::with_capacity(config.kept()),
        iteration: Vec::with_capacity(config.kept()),
        acceptance: vec![0.0; nb],
        logpost: vec![Vec::with_capacity(config.n_iter)],
        random_walk_steps: vec![0; nb],
        flagged_tau2: vec![0; nb],
    };
    let mut accepted = vec![0usize; nb];
    let mut tried = vec![0usize; nb];
    let mut window_bad = vec![0usize; nb];
    let mut window_tried = vec![0usize; nb];
    for it in 1..=config.n_iter {
        for b in 0..nb {
            let o = mh_step(&mut state, b, &mut rng)?;
            accepted[b] += o.accepted;
            tried[b] += o.parts;
            window_bad[b] += o.non_finite;
            window_tried[b] += o.parts;
            if o.random_walk {
                samples.random_walk_steps[b] += 1;
            }
        }
        if config.tau2_method != Tau2Method::Fixed {
            for b in 0..nb {
                let blk = state.block(b);
                let draw = match (&blk.design.prior, config.tau2_method) {
                    (BlockPrior::Vague, _) => continue,
                    (BlockPrior::Isotropic { .. }, Tau2Method::Auto) => gibbs_tau2(blk, &mut rng)?,
                    _ => slice_tau2(blk, config, &mut rng)?,
                };
                if draw.flagged {
                    samples.flagged_tau2[b] += 1;
                }
                state.set_tau2(b, &draw.tau2)?;
            }
        }
        samples.logpost[0].push(log_posterior(&state)?.total);
        if it % 100 == 0 {
            let worst = (0..nb)
                .map(|b| (b, window_bad[b] as f64 / window_tried[b].max(1) as f64))
                .fold((0, 0.0), |a, c| if c.1 > a.1 { c } else { a });
            if worst.1 > 0.5 {
                let dump = state
                    .blocks()
                    .iter()
                    .map(|blk| format!("{}: β={:?} τ²={:?}", blk.label(), blk.beta, blk.tau2))
                    .collect::<Vec<_>>()
                    .join("; ");
                log::error!("chain {chain}: aborting at iteration {it}");
                return Err(McmcError::NonFinite {
                    iteration: it,
                    rate: 100.0 * worst.1,
                    block: state.block(worst.0).label(),
                    dump,
                });
            }
            window_bad.iter_mut().for_each(|v| *v = 0);
            window_tried.iter_mut().for_each(|v| *v = 0);
            log::debug!("chain {chain}: iteration {it}, log-posterior {:.4}", samples.logpost[0][it - 1]);
        }
        if config.keeps(it) {
            samples.beta.push(state.blocks().iter().map(|b| b.beta.clone()).collect());
            samples.tau2.push(state.blocks().iter().map(|b| b.tau2.clone()).collect());
            samples.chain.push(chain);
            samples.iteration.push(it);
        }
    }
    for b in 0..nb {
        samples.acceptance[b] = accepted[b] as f64 / tried[b].max(1) as f64;
    }
    Ok(samples)
}

/// Runs `config.chains` chains from `state` on up to `threads` threads and
/// merges them in chain order.
pub fn run_chains(state: &ModelState, config: &SamplerConfig, threads: usize) -> Result<PosteriorSamples, McmcError> {
    config.validate()?;
    let threads = threads.max(1);
    let mut results: Vec<Option<Result<PosteriorSamples, McmcError>>> = (0..config.chains).map(|_| None).collect();
    for start in (0..config.chains).step_by(threads) {
        let end = (start + threads).min(config.chains);
        std::thread::scope(|s| {
            let handles: Vec<_> = (start..end)
                .map(|c| {
                    let st = state.clone();
                    (c, s.spawn(move || run_chain_state(st, config, c)))
                })
                .collect();
            for (c, h) in handles {
                results[c] = Some(h.join().unwrap_or(Err(McmcError::Panicked(c))));
            }
        });
    }
    let parts = results.into_iter().map(|r| r.expect("every chain ran")).collect::<Result<Vec<_>, _>>()?;
    Ok(PosteriorSamples::merge(parts).expect("at least one chain"))
}

/// Builds the model (or starts from a posterior-mode fit) and samples.
pub fn run_chain(
    spec: &ModelSpec,
    data: JointData,
    q: usize,
    config: &SamplerConfig,
    init: Option<&ModeFit>,
) -> Result<PosteriorSamples, McmcError> {
    let state = match init {
        Some(fit) => fit.state.clone(),
        None => ModelState::new(spec, data, q)?,
    };
    run_chains(&state, config, 1)
}

/// Gelman-Rubin potential scale reduction of a scalar over chains.
pub fn potential_scale_reduction(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains.iter().map(Vec::len).min().unwrap_or(0) as f64;
    if m < 2.0 || n < 2.0 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (c.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    let var = (n - 1.0) / n * w + b / n;
    (var / w).sqrt()
}

// ---------------------------------------------------------------------------
// summaries

/// One row of the long-format trace table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub chain: usize,
    pub iteration: usize,
    pub block: String,
    /// `beta[j]` or `tau2[j]`.
    pub coordinate: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRow {
    pub block: String,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub predictions: Vec<Prediction>,
    pub acceptance: Vec<AcceptanceRow>,
    pub trace: Vec<TraceRow>,
}

pub fn trace_rows(samples: &PosteriorSamples) -> Vec<TraceRow> {
    let mut out = Vec::new();
    for (s, (betas, taus)) in samples.beta.iter().zip(&samples.tau2).enumerate() {
        for (b, label) in samples.labels.iter().enumerate() {
            let row = |coordinate: String, value: f64| TraceRow {
                chain: samples.chain[s],
                iteration: samples.iteration[s],
                block: label.clone(),
                coordinate,
                value,
            };
            out.extend(betas[b].iter().enumerate().map(|(j, &v)| row(format!("beta[{j}]"), v)));
            out.extend(taus[b].iter().enumerate().map(|(j, &v)| row(format!("tau2[{j}]"), v)));
        }
    }
    out
}

/// Pointwise posterior means and 2.5/97.5% bands at `points`, the
/// acceptance table and the trace table.
pub fn summarize(samples: &PosteriorSamples, state: &ModelState, points: &[EvalPoint]) -> Result<Summary, McmcError> {
    Ok(Summary {
        predictions: sample_predictions(state, &samples.beta, points)?,
        acceptance: samples
            .labels
            .iter()
            .zip(&samples.acceptance)
            .map(|(l, &r)| AcceptanceRow { block: l.clone(), rate: r })
            .collect(),
        trace: trace_rows(samples),
    })
}

/// Sample quantile of a scalar's draws.
pub fn draw_quantile(draws: &[f64], p: f64) -> f64 {
    let mut v = draws.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::PenaltyDef;
    use crate::model::{LongRecord, Predictor, SplineSettings, SubjectRecord, TermKind, TermSpec};
    use nalgebra::DMatrix;
    use statrs::distribution::{ContinuousCDF, InverseGamma};
    use std::collections::BTreeMap;

    /// Gaussian marker only, no association: every μ block is exactly
    /// Gaussian given σ.
    fn gaussian_state(smooth: bool) -> ModelState {
        let mut rng = chain_rng(99, 0);
        let mut subjects = Vec::new();
        let mut records = Vec::new();
        for i in 0..60 {
            let x: f64 = rng.random_range(-2.0..2.0);
            subjects.push(SubjectRecord {
                id: i.to_string(),
                time: 5.0,
                event: i % 3 == 0,
                covariates: BTreeMap::from([("x1".to_string(), x)]),
            });
            let e: f64 = rng.sample(StandardNormal);
            records.push(LongRecord {
                subject: i,
                time: 1.0,
                y: 1.0 + x.sin() + 0.5 * e,
            });
        }
        let mut terms = vec![
            TermSpec::new(Predictor::Mu, TermKind::Intercept),
            TermSpec::new(Predictor::Sigma, TermKind::Intercept),
        ];
        if smooth {
            terms.push(TermSpec::new(
                Predictor::Mu,
                TermKind::Smooth {
                    covariate: "x1".into(),
                    spline: SplineSettings {
                        n_knots: 5,
                        degree: 1,
                        diff_order: 1,
                    },
                },
            ));
        }
        let data = JointData::new(subjects, records).unwrap();
        ModelState::new(&ModelSpec::new(terms), data, 25).unwrap()
    }

    fn mu_blocks(state: &ModelState) -> Vec<usize> {
        state.blocks_of(Predictor::Mu).to_vec()
    }

    #[test]
    fn kept_sample_arithmetic() {
        let c = SamplerConfig {
            n_iter: 23,
            burn_in: 3,
            thin: 20,
            ..SamplerConfig::default()
        };
        assert_eq!(c.kept(), 1);
        let c = SamplerConfig {
            n_iter: 23000,
            burn_in: 3000,
            thin: 20,
            ..SamplerConfig::default()
        };
        assert_eq!(c.kept(), 1000);
        assert_eq!((1..=c.n_iter).filter(|&i| c.keeps(i)).count(), 1000);
        let bad = SamplerConfig {
            n_iter: 10,
            burn_in: 10,
            ..SamplerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_kept_draw_from_short_chain() {
        let state = gaussian_state(false);
        let c = SamplerConfig {
            n_iter: 7,
            burn_in: 5,
            thin: 2,
            ..SamplerConfig::default()
        };
        let s = run_chains(&state, &c, 1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.iteration, vec![7]);
        assert_eq!(s.logpost[0].len(), 7);
        assert!(s.acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn proposal_density_matches_dense_formula() {
        let h = DMatrix::from_row_slice(2, 2, &[-2.0, 0.6, 0.6, -1.0]);
        let d = Derivatives {
            score: DVector::from_vec(vec![0.3, -0.7]),
            hessian: Curvature::Dense(h.clone()),
        };
        let beta = [0.5, -1.0];
        let prop = GaussianProposal::new(&d, &beta);
        let x = prop.draw(2, &mut chain_rng(1, 0));
        let cov = (-&h).try_inverse().unwrap();
        let mean = DVector::from_column_slice(&beta) + &cov * &d.score;
        let r = DVector::from_column_slice(&x) - &mean;
        let manual = -(2.0 * std::f64::consts::PI).ln() - 0.5 * cov.determinant().ln()
            - 0.5 * r.dot(&(cov.try_inverse().unwrap() * &r));
        assert!((prop.log_density(&x)[0] - manual).abs() < 1e-10);
    }

    #[test]
    fn zero_score_unit_curvature_gives_standard_normal() {
        let d = Derivatives {
            score: DVector::zeros(3),
            hessian: Curvature::Dense(-DMatrix::identity(3, 3)),
        };
        let beta = [1.0, 2.0, 3.0];
        let prop = GaussianProposal::new(&d, &beta);
        assert_eq!(prop.parts[0].mean.as_slice(), &beta);
        let ld = prop.log_density(&beta)[0];
        assert!((ld + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn acceptance_edge_cases() {
        assert_eq!(log_acceptance(-3.0, -3.0, -1.0, -1.0), 0.0);
        assert!(accept(log_acceptance(-3.0, -3.0, -1.0, -1.0), &mut chain_rng(0, 0)));
        let la = log_acceptance(f64::NEG_INFINITY, -3.0, -1.0, -1.0);
        assert_eq!(la, f64::NEG_INFINITY);
        assert!(!accept(la, &mut chain_rng(0, 0)));
        assert_eq!(log_acceptance(f64::NAN, -3.0, -1.0, -1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn taylor_proposal_mean_is_the_mode_on_gaussian_targets() {
        let mut state = gaussian_state(false);
        let b = mu_blocks(&state)[0];
        let s2 = state.error_variance()[0];
        let y = state.data().responses();
        let exact = y.iter().sum::<f64>() / s2 / (y.len() as f64 / s2 + 1e-6);
        for start in [-5.0, 0.0, 7.0] {
            state.set_beta(b, &[start]).unwrap();
            let prop = GaussianProposal::new(&derivatives(&state, b).unwrap(), &[start]);
            assert!((prop.parts[0].mean[0] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn conjugate_normal_mean() {
        let mut state = gaussian_state(false);
        let b = mu_blocks(&state)[0];
        let s2 = state.error_variance()[0];
        let y = state.data().responses();
        let v = 1.0 / (y.len() as f64 / s2 + 1e-6);
        let m = v * y.iter().sum::<f64>() / s2;
        let mut rng = chain_rng(5, 0);
        let n = 4000;
        let mut draws = Vec::with_capacity(n);
        let mut acc = 0;
        for _ in 0..n {
            acc += mh_step(&mut state, b, &mut rng).unwrap().accepted;
            draws.push(state.block(b).beta[0]);
        }
        assert!(acc as f64 / n as f64 > 0.95);
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - m).abs() < 3.0 * (v / n as f64).sqrt(), "{mean} vs {m}");
    }

    #[test]
    fn mh_kernel_preserves_a_gaussian_target() {
        let mut state = gaussian_state(true);
        let b = *mu_blocks(&state).last().unwrap();
        assert_eq!(state.block(b).n_coef(), 2);
        let d = derivatives(&state, b).unwrap();
        let neg_h = -d.hessian.to_dense(2);
        let cov = neg_h.clone().try_inverse().unwrap();
        let mean = DVector::from_column_slice(&state.block(b).beta) + &cov * &d.score;
        let mut rng = chain_rng(8, 0);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [[0.0; 2]; 2];
        let mut acc = 0;
        for _ in 0..n {
            acc += mh_step(&mut state, b, &mut rng).unwrap().accepted;
            let x = &state.block(b).beta;
            for i in 0..2 {
                sum[i] += x[i];
                for j in 0..2 {
                    sq[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]);
                }
            }
        }
        assert!(acc as f64 / n as f64 > 0.95);
        let nf = n as f64;
        for i in 0..2 {
            let se = (cov[(i, i)] / nf).sqrt();
            assert!((sum[i] / nf - mean[i]).abs() < 3.0 * se);
            for j in 0..2 {
                let c = sq[i][j] / nf;
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / nf).sqrt();
                assert!((c - cov[(i, j)]).abs() < 3.0 * se, "cov[{i}][{j}] {c} vs {}", cov[(i, j)]);
            }
        }
    }

    #[test]
    fn gibbs_tau2_matches_inverse_gamma_moments() {
        let rank = 40;
        let prior = BlockPrior::from_penalty(&PenaltyDef::identity(rank));
        let beta = vec![0.0; rank];
        let mut rng = chain_rng(11, 0);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| gibbs_tau2_prior(&prior, &beta, &mut rng).unwrap().tau2[0]).collect();
        let a = IG_A + rank as f64 / 2.0;
        let mean = IG_B / (a - 1.0);
        let var = mean * mean / (a - 2.0);
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((m / mean - 1.0).abs() < 0.02, "{m} vs {mean}");
        assert!((v / var - 1.0).abs() < 0.02, "{v} vs {var}");
        // determinism
        let again: Vec<f64> = {
            let mut rng = chain_rng(11, 0);
            (0..5).map(|_| gibbs_tau2_prior(&prior, &beta, &mut rng).unwrap().tau2[0]).collect()
        };
        assert_eq!(again[..], draws[..5]);
        assert!(gibbs_tau2_prior(&BlockPrior::Vague, &beta, &mut rng).is_err());
    }

    fn ks_against_ig(draws: &mut [f64], shape: f64, scale: f64) -> f64 {
        let ig = InverseGamma::new(shape, scale).unwrap();
        draws.sort_by(|a, b| a.total_cmp(b));
        let n = draws.len() as f64;
        draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = ig.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn slice_tau2_reduces_to_inverse_gamma() {
        let k_s = crate::basis::difference_penalty(6, 1).unwrap().matrices[0].clone();
        let prior = BlockPrior::from_penalty(&PenaltyDef::anisotropic(k_s.clone(), DMatrix::zeros(3, 3)));
        let mut rng = chain_rng(21, 0);
        let beta: Vec<f64> = (0..18).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let q = prior.quad_forms(&beta)[0];
        let rank = prior.rank(18) as f64;
        assert_eq!(rank, 15.0);
        let mut tau2 = vec![1.0, 1.0];
        let mut draws = Vec::new();
        for _ in 0..10_000 {
            let d = slice_tau2_prior(&prior, &beta, &tau2, 1.0, 100, &mut rng).unwrap();
            tau2 = d.tau2;
            draws.push(tau2[0]);
        }
        let ks = ks_against_ig(&mut draws, IG_A + rank / 2.0, IG_B + q / 2.0);
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn slice_tau2_stays_positive_at_zero_coefficients() {
        let prior = BlockPrior::from_penalty(&PenaltyDef::anisotropic(
            DMatrix::identity(4, 4),
            crate::basis::difference_penalty(5, 2).unwrap().matrices[0].clone(),
        ));
        let beta = vec![0.0; 20];
        let run = |seed| {
            let mut rng = chain_rng(seed, 0);
            let mut tau2 = vec![1.0, 1.0];
            let mut out = Vec::new();
            for _ in 0..200 {
                tau2 = slice_tau2_prior(&prior, &beta, &tau2, 1.0, 100, &mut rng).unwrap().tau2;
                assert!(tau2.iter().all(|t| t.is_finite() && *t > 0.0));
                out.push(tau2.clone());
            }
            out
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn chains_are_reproducible() {
        let state = gaussian_state(true);
        let c = SamplerConfig {
            n_iter: 60,
            burn_in: 20,
            thin: 4,
            chains: 2,
            ..SamplerConfig::default()
        };
        let a = run_chains(&state, &c, 2).unwrap();
        let b = run_chains(&state, &c, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let summary = summarize(&a, &state, &crate::predict::evaluation_points(state.data(), &[1.0])).unwrap();
        for p in &summary.predictions {
            assert!(p.lower <= p.estimate && p.estimate <= p.upper);
        }
        assert_eq!(
            summary.trace.len(),
            a.len() * a.beta[0].iter().chain(&a.tau2[0]).map(Vec::len).sum::<usize>()
        );
    }

    #[test]
    fn identical_draws_give_zero_width_bands() {
        let state = gaussian_state(true);
        let draw: Vec<Vec<f64>> = state.blocks().iter().map(|b| b.beta.clone()).collect();
        let samples = vec![draw; 5];
        let points = crate::predict::evaluation_points(state.data(), &[]);
        let preds = sample_predictions(&state, &samples, &points).unwrap();
        for p in preds {
            assert!((p.upper - p.lower).abs() < 1e-12);
            assert!((p.estimate - p.lower).abs() < 1e-12);
        }
    }

    #[test]
    fn psrf_of_identical_chains_is_near_one() {
        let mut rng = chain_rng(2, 0);
        let chains: Vec<Vec<f64>> = (0..2).map(|_| (0..2000).map(|_| rng.sample(StandardNormal)).collect()).collect();
        assert!((potential_scale_reduction(&chains) - 1.0).abs() < 0.01);
    }
}
