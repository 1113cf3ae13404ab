use super::block::build_term;
use super::{DesignBlock, JointData, ModelError, ModelSpec, Predictor, TermKind};
use crate::likelihood::QuadratureGrid;
use crate::linalg::SparseRows;
use std::sync::Arc;

/// The three row sets on which predictors are cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointSet {
    /// Longitudinal measurement times `t_ij`.
    Long,
    /// Follow-up times `T_i`.
    Surv,
    /// Quadrature nodes `u_iq`, subject-major.
    Quad,
}

/// Values of one quantity on all three row sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowValues {
    pub long: Vec<f64>,
    pub surv: Vec<f64>,
    pub quad: Vec<f64>,
}

impl RowValues {
    fn zeros(n_long: usize, n_surv: usize, n_quad: usize) -> Self {
        Self {
            long: vec![0.0; n_long],
            surv: vec![0.0; n_surv],
            quad: vec![0.0; n_quad],
        }
    }

    pub fn get(&self, set: PointSet) -> &[f64] {
        match set {
            PointSet::Long => &self.long,
            PointSet::Surv => &self.surv,
            PointSet::Quad => &self.quad,
        }
    }

    fn max_abs_diff(&self, other: &Self) -> f64 {
        let d = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0_f64, f64::max)
        };
        d(&self.long, &other.long)
            .max(d(&self.surv, &other.surv))
            .max(d(&self.quad, &other.quad))
    }
}

/// All design blocks plus cached predictor values.
///
/// Each block's fitted contribution `X_b β_b` is cached per row set and
/// every predictor is the sum of its blocks' contributions, always added in
/// block order, so a refreshed cache is bitwise equal to a recomputation.
#[derive(Debug, Clone)]
pub struct ModelState {
    data: Arc<JointData>,
    quad: Arc<QuadratureGrid>,
    blocks: Vec<DesignBlock>,
    fits: Vec<RowValues>,
    eta: Vec<RowValues>,
    by_predictor: Vec<Vec<usize>>,
}

/// Translate a model specification into design blocks and initialize them.
///
/// Blocks are ordered λ, γ, α, μ, σ and, within a predictor, by declaration.
/// All coefficients start at zero except the μ and σ intercepts (mean and log
/// standard deviation of the response); variances start at 10.
pub fn build_blocks(
    spec: &ModelSpec,
    data: Arc<JointData>,
    quad: Arc<QuadratureGrid>,
) -> Result<ModelState, ModelError> {
    if quad.n_subjects() != data.n() {
        return Err(ModelError::InvalidTerm(format!(
            "quadrature grid built for {} subjects, data has {}",
            quad.n_subjects(),
            data.n()
        )));
    }
    let mut terms: Vec<_> = spec.terms.iter().collect();
    terms.sort_by_key(|t| t.predictor); // stable: declaration order within a predictor
    let y = data.responses();
    let y_mean = if y.is_empty() { 0.0 } else { y.iter().sum::<f64>() / y.len() as f64 };
    let y_sd = if y.len() > 1 {
        (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64).sqrt()
    } else {
        1.0
    };
    let mut blocks = Vec::with_capacity(terms.len());
    for t in terms {
        let design = build_term(t, &data, &quad)?;
        let p = design.n_coef();
        let mut beta = vec![0.0; p];
        if t.kind == TermKind::Intercept {
            match t.predictor {
                Predictor::Mu => beta[0] = y_mean,
                Predictor::Sigma if y_sd > 0.0 => beta[0] = y_sd.ln(),
                _ => {}
            }
        }
        let tau2 = vec![10.0; design.prior.n_variances()];
        blocks.push(DesignBlock {
            design: Arc::new(design),
            beta,
            tau2,
        });
    }
    Ok(ModelState::from_blocks(data, quad, blocks))
}

impl ModelState {
    /// Convenience: equidistant `q`-node quadrature plus [`build_blocks`].
    pub fn new(spec: &ModelSpec, data: JointData, q: usize) -> Result<Self, ModelError> {
        let quad = QuadratureGrid::new(&data.follow_up(), q)
            .map_err(|e| ModelError::InvalidTerm(e.to_string()))?;
        build_blocks(spec, Arc::new(data), Arc::new(quad))
    }

    pub fn from_blocks(data: Arc<JointData>, quad: Arc<QuadratureGrid>, blocks: Vec<DesignBlock>) -> Self {
        let mut by_predictor = vec![Vec::new(); 5];
        for (b, blk) in blocks.iter().enumerate() {
            by_predictor[blk.predictor().index()].push(b);
        }
        let (nl, ns, nq) = (data.n_obs(), data.n(), quad.total_nodes());
        let mut s = Self {
            data,
            quad,
            fits: vec![RowValues::zeros(nl, ns, nq); blocks.len()],
            eta: vec![RowValues::zeros(nl, ns, nq); 5],
            blocks,
            by_predictor,
        };
        for b in 0..s.blocks.len() {
            s.fits[b] = s.block_fit(b);
        }
        for k in Predictor::ALL {
            s.eta[k.index()] = s.sum_fits(k);
        }
        s
    }

    fn block_fit(&self, b: usize) -> RowValues {
        let d = &self.blocks[b].design;
        let beta = &self.blocks[b].beta;
        RowValues {
            long: d.long.mul_vec(beta),
            surv: d.surv.mul_vec(beta),
            quad: d.quad.mul_vec(beta),
        }
    }

    fn sum_fits(&self, k: Predictor) -> RowValues {
        let mut out = RowValues::zeros(self.data.n_obs(), self.data.n(), self.quad.total_nodes());
        for &b in &self.by_predictor[k.index()] {
            let f = &self.fits[b];
            for (o, v) in out.long.iter_mut().zip(&f.long) {
                *o += v;
            }
            for (o, v) in out.surv.iter_mut().zip(&f.surv) {
                *o += v;
            }
            for (o, v) in out.quad.iter_mut().zip(&f.quad) {
                *o += v;
            }
        }
        out
    }

    pub fn data(&self) -> &JointData {
        &self.data
    }

    pub fn data_arc(&self) -> Arc<JointData> {
        self.data.clone()
    }

    pub fn quad(&self) -> &QuadratureGrid {
        &self.quad
    }

    pub fn quad_arc(&self) -> Arc<QuadratureGrid> {
        self.quad.clone()
    }

    pub fn blocks(&self) -> &[DesignBlock] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &DesignBlock {
        &self.blocks[b]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Block indices belonging to predictor `k`, in update order.
    pub fn blocks_of(&self, k: Predictor) -> &[usize] {
        &self.by_predictor[k.index()]
    }

    /// Cached values of predictor `k` on all row sets.
    pub fn eta(&self, k: Predictor) -> &RowValues {
        &self.eta[k.index()]
    }

    /// Cached contribution `X_b β_b` of block `b`.
    pub fn block_values(&self, b: usize) -> &RowValues {
        &self.fits[b]
    }

    /// Error variances `exp(η_σ)²` at the longitudinal records (diagonal of R).
    pub fn error_variance(&self) -> Vec<f64> {
        self.eta(Predictor::Sigma).long.iter().map(|s| (2.0 * s).exp()).collect()
    }

    /// Replace block `b`'s coefficients and refresh the caches.
    pub fn set_beta(&mut self, b: usize, beta: &[f64]) -> Result<(), ModelError> {
        let blk = self.blocks.get_mut(b).ok_or(ModelError::NoSuchBlock(b))?;
        if beta.len() != blk.n_coef() {
            return Err(ModelError::CoefficientLength {
                block: blk.label(),
                expected: blk.n_coef(),
                actual: beta.len(),
            });
        }
        blk.beta.copy_from_slice(beta);
        let k = blk.predictor();
        self.fits[b] = self.block_fit(b);
        self.eta[k.index()] = self.sum_fits(k);
        Ok(())
    }

    /// Replace block `b`'s variance parameters.
    pub fn set_tau2(&mut self, b: usize, tau2: &[f64]) -> Result<(), ModelError> {
        let blk = self.blocks.get_mut(b).ok_or(ModelError::NoSuchBlock(b))?;
        if tau2.len() != blk.tau2.len() {
            return Err(ModelError::InvalidTerm(format!(
                "{} takes {} variance parameter(s), got {}",
                blk.label(),
                blk.tau2.len(),
                tau2.len()
            )));
        }
        if let Some(&bad) = tau2.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(ModelError::NonPositiveVariance(bad));
        }
        blk.tau2.copy_from_slice(tau2);
        Ok(())
    }

    /// Maximum absolute difference between the cached predictors and a full
    /// recomputation from the blocks.
    pub fn cache_deviation(&self) -> f64 {
        let fresh = Self::from_blocks(self.data.clone(), self.quad.clone(), self.blocks.clone());
        Predictor::ALL
            .iter()
            .map(|k| self.eta(*k).max_abs_diff(fresh.eta(*k)))
            .fold(0.0, f64::max)
    }

    /// Resolve subject identifiers to indices.
    pub fn subject_indices(&self, ids: &[&str]) -> Result<Vec<usize>, ModelError> {
        ids.iter()
            .map(|id| {
                self.data
                    .subject_index(id)
                    .ok_or_else(|| ModelError::UnknownSubject(id.to_string()))
            })
            .collect()
    }

    /// Design rows of block `b` at arbitrary `(subject, time)` pairs.
    pub fn design_rows(&self, b: usize, subjects: &[usize], times: &[f64]) -> Result<SparseRows, ModelError> {
        let n = self.data.n();
        if let Some(&bad) = subjects.iter().find(|&&i| i >= n) {
            return Err(ModelError::UnknownSubject(format!("#{bad}")));
        }
        if subjects.len() != times.len() {
            return Err(ModelError::InvalidTerm(format!(
                "{} subjects but {} time points",
                subjects.len(),
                times.len()
            )));
        }
        Ok(self.blocks[b].design.rows_at(subjects, times))
    }

    /// `η_k` at arbitrary `(subject, time)` pairs; time is ignored by the
    /// time-constant predictors γ and σ.
    pub fn eval_predictor(&self, k: Predictor, subjects: &[usize], times: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; times.len()];
        for &b in self.blocks_of(k) {
            let rows = self.design_rows(b, subjects, times)?;
            for (o, v) in out.iter_mut().zip(rows.mul_vec(&self.blocks[b].beta)) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// [`eval_predictor`](Self::eval_predictor) with subject identifiers.
    pub fn eval_predictor_ids(&self, k: Predictor, ids: &[&str], times: &[f64]) -> Result<Vec<f64>, ModelError> {
        let subjects = self.subject_indices(ids)?;
        self.eval_predictor(k, &subjects, times)
    }

    /// Coefficients and variances of all blocks.
    pub fn parameters(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.blocks.iter().map(|b| (b.beta.clone(), b.tau2.clone())).collect()
    }

    pub fn set_parameters(&mut self, params: &[(Vec<f64>, Vec<f64>)]) -> Result<(), ModelError> {
        if params.len() != self.blocks.len() {
            return Err(ModelError::NoSuchBlock(params.len()));
        }
        for (b, (beta, tau2)) in params.iter().enumerate() {
            self.set_tau2(b, tau2)?;
            self.set_beta(b, beta)?;
        }
        Ok(())
    }
}
