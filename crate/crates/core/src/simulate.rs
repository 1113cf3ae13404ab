//! Ground-truth joint datasets: functional random-intercept trajectories,
//! survival times by inverting the cumulative hazard, uniform and
//! administrative censoring, and random missingness.

use crate::basis::{bspline_design, difference_penalty, BasisError, SplineBasisDef};
use crate::model::{DataError, JointData, LongRecord, Predictor, SubjectRecord, TIME_REFERENCE_POINTS};
use crate::predict::{evaluation_points, EvalSet};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown setting `{0}` (expected one of 1a, 1b, 2a, 2b, 1a-mini, 2a-mini)")]
    UnknownSetting(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("FRI precision is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// True association `η_α(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaTruth {
    Constant(f64),
    /// `cos((t − shift) / scale)`.
    Cosine { shift: f64, scale: f64 },
}

impl AlphaTruth {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            AlphaTruth::Constant(c) => c,
            AlphaTruth::Cosine { shift, scale } => ((t - shift) / scale).cos(),
        }
    }

    pub fn is_time_varying(&self) -> bool {
        matches!(self, AlphaTruth::Cosine { .. })
    }
}

/// Simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub name: String,
    pub n: usize,
    /// Measurement grid `P`, strictly increasing.
    pub grid: Vec<f64>,
    /// Fraction of the remaining longitudinal records set to missing.
    pub missing_frac: f64,
    pub alpha: AlphaTruth,
    pub error_sd: f64,
    /// Variance of the random intercepts.
    pub ri_var: f64,
    pub tau2_s: f64,
    pub tau2_t: f64,
    /// Knots of the cubic basis generating the functional random intercepts.
    pub fri_knots: usize,
    /// Bound `c` of the covariate laws `x1, x2 ~ U(−c, c)`.
    pub covariate_bound: f64,
    pub admin_censoring: bool,
    pub uniform_censoring: bool,
    /// Upper end of the event-time search; defaults to `max(P)`.
    pub horizon: f64,
    /// Nodes of the fine trapezoid used to integrate the true hazard.
    pub fine_nodes: usize,
    pub seed: u64,
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|j| lo + step * j as f64).collect()
}

impl SimSetting {
    pub const PRESETS: [&'static str; 6] = ["1a", "1b", "2a", "2b", "1a-mini", "2a-mini"];

    pub fn preset(name: &str, seed: u64) -> Result<Self, SimError> {
        let (n, g, p, alpha) = match name {
            "1a" => (150, grid(0.0, 120.0, 1.0), 0.75, AlphaTruth::Constant(1.0)),
            "1b" => (300, grid(0.0, 72.0, 3.0), 0.10, AlphaTruth::Constant(1.0)),
            "2a" => (150, grid(0.0, 120.0, 1.0), 0.75, AlphaTruth::Cosine { shift: 33.0, scale: 33.0 }),
            "2b" => (300, grid(0.0, 72.0, 3.0), 0.10, AlphaTruth::Cosine { shift: 20.0, scale: 20.0 }),
            "1a-mini" => (50, grid(0.0, 60.0, 2.0), 0.5, AlphaTruth::Constant(1.0)),
            "2a-mini" => (50, grid(0.0, 60.0, 2.0), 0.5, AlphaTruth::Cosine { shift: 33.0, scale: 33.0 }),
            _ => return Err(SimError::UnknownSetting(name.to_string())),
        };
        let horizon = *g.last().unwrap();
        Ok(Self {
            name: name.to_string(),
            n,
            grid: g,
            missing_frac: p,
            alpha,
            error_sd: 0.3,
            ri_var: 0.25,
            tau2_s: 1.0,
            tau2_t: 0.2,
            fri_knots: 12,
            covariate_bound: 3.0,
            admin_censoring: true,
            uniform_censoring: true,
            horizon,
            fine_nodes: 1000,
            seed,
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.grid.is_empty() || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return bad("grid must be nonempty and strictly increasing");
        }
        if self.grid[0] < 0.0 {
            return bad("grid must start at or after time 0");
        }
        if !(0.0..1.0).contains(&self.missing_frac) {
            return bad("missing fraction must lie in [0, 1)");
        }
        if !(self.error_sd > 0.0) {
            return bad("error sd must be positive");
        }
        if !(self.ri_var >= 0.0 && self.tau2_s > 0.0 && self.tau2_t > 0.0) {
            return bad("variances must be positive");
        }
        if !(self.horizon > 0.0) || self.fine_nodes < 2 {
            return bad("horizon must be positive and the fine grid needs 2 nodes");
        }
        Ok(())
    }

    pub fn max_grid(&self) -> f64 {
        *self.grid.last().expect("validated grid")
    }
}

/// True values of one simulated subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub x1: f64,
    pub x2: f64,
    pub random_intercept: f64,
    /// Centred FRI spline coefficients.
    pub fri_coef: Vec<f64>,
    /// Event time before censoring (`None` beyond the horizon).
    pub event_time: Option<f64>,
}

/// Everything needed to evaluate the true predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub setting: SimSetting,
    pub subjects: Vec<SubjectTruth>,
    pub fri_basis: SplineBasisDef,
    /// Subjects left without longitudinal records after missingness.
    pub flagged: Vec<usize>,
}

/// `0.1 (t + 2) exp(−0.075 t)`.
pub fn mean_trajectory(t: f64) -> f64 {
    0.1 * (t + 2.0) * (-0.075 * t).exp()
}

/// `1.4 log((t + 10) / 1000)`.
pub fn log_baseline_hazard(t: f64) -> f64 {
    1.4 * ((t + 10.0) / 1000.0).ln()
}

impl SimTruth {
    pub fn fri(&self, i: usize, t: f64) -> f64 {
        let (first, vals, _) = self.fri_basis.local_clamped(t);
        let c = &self.subjects[i].fri_coef;
        vals.iter().enumerate().map(|(r, v)| v * c[first + r]).sum()
    }

    pub fn mu(&self, i: usize, t: f64) -> f64 {
        let s = &self.subjects[i];
        0.5 + mean_trajectory(t) + s.random_intercept + self.fri(i, t) + 0.6 * s.x2.sin()
    }

    pub fn lambda(&self, t: f64) -> f64 {
        log_baseline_hazard(t)
    }

    pub fn gamma(&self, i: usize) -> f64 {
        0.5 * self.subjects[i].x1.sin()
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.setting.alpha.eval(t)
    }

    pub fn log_sigma(&self) -> f64 {
        self.setting.error_sd.ln()
    }

    pub fn log_hazard(&self, i: usize, t: f64) -> f64 {
        self.lambda(t) + self.gamma(i) + self.alpha(t) * self.mu(i, t)
    }

    pub fn eval(&self, k: Predictor, i: usize, t: f64) -> f64 {
        match k {
            Predictor::Lambda => self.lambda(t),
            Predictor::Gamma => self.gamma(i),
            Predictor::Alpha => self.alpha(t),
            Predictor::Mu => self.mu(i, t),
            Predictor::Sigma => self.log_sigma(),
        }
    }
}

/// One row of the truth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub predictor: Predictor,
    pub set: EvalSet,
    pub id: String,
    pub time: f64,
    pub value: f64,
}

/// A simulated dataset with its truth.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: JointData,
    pub truth: SimTruth,
}

impl SimDataset {
    /// True predictor values at the standard evaluation points, using the
    /// measurement grid for the grid set.
    pub fn truth_table(&self) -> Vec<TruthPoint> {
        evaluation_points(&self.data, &self.truth.setting.grid)
            .into_iter()
            .map(|p| TruthPoint {
                predictor: p.predictor,
                set: p.set,
                id: self.data.subjects()[p.subject].id.clone(),
                time: p.time,
                value: match p.set {
                    EvalSet::Total => self.truth.lambda(p.time) + self.truth.gamma(p.subject),
                    _ => self.truth.eval(p.predictor, p.subject, p.time),
                },
            })
            .collect()
    }
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// FRI coefficient sampler: per-subject precision `I/τ_s² + K_t/τ_t²`,
/// drawn through its eigen-decomposition and centred so that the curve
/// averages to zero over a uniform reference grid.
struct FriSampler {
    def: SplineBasisDef,
    factor: DMatrix<f64>,
    ref_mean: DVector<f64>,
}

impl FriSampler {
    fn new(s: &SimSetting) -> Result<Self, SimError> {
        let lo = s.grid[0].min(0.0);
        let hi = s.max_grid();
        let def = SplineBasisDef::equidistant(lo, hi, s.fri_knots, 3)?;
        let d = def.n_basis();
        let kt = difference_penalty(d, 2)?.matrices[0].clone();
        let prec = DMatrix::<f64>::identity(d, d) / s.tau2_s + kt / s.tau2_t;
        let eig = SymmetricEigen::new(prec);
        let min = eig.eigenvalues.min();
        if !(min > 0.0) {
            return Err(SimError::NotPositiveDefinite(min));
        }
        let scale = eig.eigenvalues.map(|e| 1.0 / e.sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&scale);
        let m = TIME_REFERENCE_POINTS;
        let ref_grid: Vec<f64> = (0..m).map(|j| lo + (hi - lo) * j as f64 / (m - 1) as f64).collect();
        let x = bspline_design(&def, &ref_grid)?;
        let ref_mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / m as f64));
        Ok(Self { def, factor, ref_mean })
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.def.n_basis();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let b = &self.factor * z;
        // partition of unity: subtracting a constant shifts the curve
        let c = self.ref_mean.dot(&b);
        b.iter().map(|v| v - c).collect()
    }
}

/// Event time by inverting the cumulative hazard: the hazard is linear
/// between the nodes of a fine grid on `[0, horizon]`, so `Λ` is piecewise
/// quadratic and the crossing of `target` is found by bisection to 1e−8.
pub fn invert_cumulative_hazard<F: Fn(f64) -> f64>(
    hazard: F,
    target: f64,
    horizon: f64,
    nodes: usize,
) -> Option<f64> {
    let h = horizon / (nodes - 1) as f64;
    let mut t0 = 0.0;
    let mut h0 = hazard(0.0);
    let mut cum = 0.0;
    for k in 1..nodes {
        let t1 = if k == nodes - 1 { horizon } else { h * k as f64 };
        let h1 = hazard(t1);
        let dt = t1 - t0;
        let seg = 0.5 * (h0 + h1) * dt;
        if cum + seg >= target {
            let slope = (h1 - h0) / dt;
            let lam = |s: f64| cum + h0 * s + 0.5 * slope * s * s;
            let (mut lo, mut hi) = (0.0, dt);
            while hi - lo > 1e-8 {
                let mid = 0.5 * (lo + hi);
                if lam(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(t0 + 0.5 * (lo + hi));
        }
        cum += seg;
        t0 = t1;
        h0 = h1;
    }
    None
}

/// Draw a complete dataset with truth for `setting`.
///
/// Every subject uses its own ChaCha20 stream (stream `i + 1` of the seed),
/// the missingness draw uses stream 0, so results are reproducible and do
/// not depend on evaluation order.
pub fn assemble_dataset(setting: &SimSetting) -> Result<SimDataset, SimError> {
    setting.validate()?;
    let fri = FriSampler::new(setting)?;
    let c = setting.covariate_bound;
    let pmax = setting.max_grid();
    let mut subjects = Vec::with_capacity(setting.n);
    let mut candidates: Vec<LongRecord> = Vec::new();
    let mut partial = SimTruth {
        setting: setting.clone(),
        subjects: Vec::new(),
        fri_basis: fri.def.clone(),
        flagged: Vec::new(),
    };
    for i in 0..setting.n {
        let mut rng = subject_rng(setting.seed, i as u64 + 1);
        let x1 = rng.random_range(-c..c);
        let x2 = rng.random_range(-c..c);
        let z: f64 = rng.sample(StandardNormal);
        let ri = setting.ri_var.sqrt() * z;
        let coef = fri.draw(&mut rng);
        let u: f64 = rng.random();
        let target = -(1.0 - u).ln(); // 1 − u ∈ (0, 1]
        let censor_u: f64 = rng.random_range(0.0..1.5 * pmax);
        partial.subjects.push(SubjectTruth {
            x1,
            x2,
            random_intercept: ri,
            fri_coef: coef,
            event_time: None,
        });
        let event_time = invert_cumulative_hazard(
            |t| partial.log_hazard(i, t).exp(),
            target,
            setting.horizon,
            setting.fine_nodes,
        );
        partial.subjects[i].event_time = event_time;
        let mut censor = f64::INFINITY;
        if setting.admin_censoring {
            censor = censor.min(pmax);
        }
        if setting.uniform_censoring {
            censor = censor.min(censor_u);
        }
        let (time, event) = match event_time {
            Some(t) if t < censor => (t, true),
            _ if censor.is_finite() => (censor, false),
            _ => (setting.horizon, false),
        };
        for &t in &setting.grid {
            let eps: f64 = rng.sample(StandardNormal);
            if t <= time {
                candidates.push(LongRecord {
                    subject: i,
                    time: t,
                    y: partial.mu(i, t) + setting.error_sd * eps,
                });
            }
        }
        subjects.push(SubjectRecord {
            id: (i + 1).to_string(),
            time,
            event,
            covariates: BTreeMap::from([("x1".to_string(), x1), ("x2".to_string(), x2)]),
        });
    }
    let m = candidates.len();
    let drop = (setting.missing_frac * m as f64).round() as usize;
    let mut rng = subject_rng(setting.seed, 0);
    let mut removed = vec![false; m];
    for j in rand::seq::index::sample(&mut rng, m, drop) {
        removed[j] = true;
    }
    let records: Vec<LongRecord> = candidates
        .into_iter()
        .zip(removed)
        .filter(|(_, r)| !r)
        .map(|(rec, _)| rec)
        .collect();
    let data = JointData::new(subjects, records)?;
    partial.flagged = data.subjects_without_records();
    if !partial.flagged.is_empty() {
        log::info!(
            "{} subject(s) have no longitudinal records after missingness",
            partial.flagged.len()
        );
    }
    Ok(SimDataset { data, truth: partial })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_hazard_inversion_is_exponential_quantile() {
        let h = 0.3;
        let target = 1.7;
        let t = invert_cumulative_hazard(|_| h, target, 100.0, 1000).unwrap();
        assert!((t - target / h).abs() < 1e-7);
        assert!(invert_cumulative_hazard(|_| h, 100.0, 10.0, 1000).is_none());
    }

    #[test]
    fn cosine_alpha_is_one_at_shift() {
        let s = SimSetting::preset("2a", 1).unwrap();
        assert_eq!(s.alpha.eval(33.0), 1.0);
    }

    #[test]
    fn same_seed_same_dataset() {
        let s = SimSetting::preset("1a-mini", 11).unwrap();
        let a = assemble_dataset(&s).unwrap();
        let b = assemble_dataset(&s).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn censoring_accounting() {
        let s = SimSetting::preset("1a-mini", 3).unwrap();
        let d = assemble_dataset(&s).unwrap();
        let pmax = s.max_grid();
        for (subj, truth) in d.data.subjects().iter().zip(&d.truth.subjects) {
            if subj.event {
                assert!(subj.time < pmax);
                assert_eq!(Some(subj.time), truth.event_time);
            } else {
                assert!(subj.time <= pmax);
                if let Some(t) = truth.event_time {
                    assert!(subj.time <= t);
                }
            }
        }
    }

    #[test]
    fn record_count_without_missingness_or_censoring() {
        let mut s = SimSetting::preset("1a-mini", 5).unwrap();
        s.missing_frac = 0.0;
        s.uniform_censoring = false;
        s.grid = vec![0.0, 10.0, 20.0, 30.0];
        s.horizon = 30.0;
        let d = assemble_dataset(&s).unwrap();
        let expect: usize = d
            .data
            .subjects()
            .iter()
            .map(|x| s.grid.iter().filter(|&&t| t <= x.time).count())
            .sum();
        assert_eq!(d.data.n_obs(), expect);
    }
}
