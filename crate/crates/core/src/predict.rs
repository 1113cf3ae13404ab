//! Evaluation points shared by fitted predictions, simulation truth and the
//! error metrics, plus pointwise estimates with 95% bands.

use crate::linalg::{quantile_sorted, SparseRows};
use crate::model::{JointData, ModelError, ModelState, Predictor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Where a predictor is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalSet {
    /// At the observed longitudinal records `(i, t_ij)` (μ, σ).
    Long,
    /// At each subject's follow-up time `T_i` (λ, γ, α).
    Event,
    /// On a fixed time grid for every subject (λ, α).
    Grid,
    /// `η_λ + η_γ` at `T_i`, reported under λ. Unlike its two parts this sum
    /// does not depend on where the survival intercept is placed.
    Total,
}

impl EvalSet {
    pub fn name(self) -> &'static str {
        match self {
            EvalSet::Long => "long",
            EvalSet::Event => "event",
            EvalSet::Grid => "grid",
            EvalSet::Total => "total",
        }
    }
}

impl fmt::Display for EvalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "long" => Ok(EvalSet::Long),
            "event" => Ok(EvalSet::Event),
            "grid" => Ok(EvalSet::Grid),
            "total" => Ok(EvalSet::Total),
            _ => Err(format!("unknown evaluation set `{s}`")),
        }
    }
}

/// One `(predictor, set, subject, time)` evaluation target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub predictor: Predictor,
    pub set: EvalSet,
    pub subject: usize,
    pub time: f64,
}

/// The standard evaluation targets: μ and σ at the records, λ, γ, α and
/// λ + γ at the follow-up times, λ and α on `grid` for every subject.
pub fn evaluation_points(data: &JointData, grid: &[f64]) -> Vec<EvalPoint> {
    let mut out = Vec::new();
    for k in [Predictor::Mu, Predictor::Sigma] {
        for r in data.records() {
            out.push(EvalPoint {
                predictor: k,
                set: EvalSet::Long,
                subject: r.subject,
                time: r.time,
            });
        }
    }
    for k in [Predictor::Lambda, Predictor::Gamma, Predictor::Alpha] {
        for (i, s) in data.subjects().iter().enumerate() {
            out.push(EvalPoint {
                predictor: k,
                set: EvalSet::Event,
                subject: i,
                time: s.time,
            });
        }
    }
    for (i, s) in data.subjects().iter().enumerate() {
        out.push(EvalPoint {
            predictor: Predictor::Lambda,
            set: EvalSet::Total,
            subject: i,
            time: s.time,
        });
    }
    for k in [Predictor::Lambda, Predictor::Alpha] {
        for i in 0..data.n() {
            for &t in grid {
                out.push(EvalPoint {
                    predictor: k,
                    set: EvalSet::Grid,
                    subject: i,
                    time: t,
                });
            }
        }
    }
    out
}

/// A pointwise estimate with a 95% band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub predictor: Predictor,
    pub set: EvalSet,
    pub id: String,
    pub time: f64,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Groups evaluation points by the blocks that contribute to them, keeping
/// their original positions.
fn groups(state: &ModelState, points: &[EvalPoint]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for k in Predictor::ALL {
        for total in [false, true] {
            let idx: Vec<usize> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| p.predictor == k && (p.set == EvalSet::Total) == total)
                .map(|(j, _)| j)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let mut blocks = state.blocks_of(k).to_vec();
            if total {
                blocks.extend_from_slice(state.blocks_of(Predictor::Gamma));
            }
            out.push((blocks, idx));
        }
    }
    out
}

fn design_for(state: &ModelState, b: usize, points: &[EvalPoint], idx: &[usize]) -> Result<SparseRows, ModelError> {
    let subjects: Vec<usize> = idx.iter().map(|&j| points[j].subject).collect();
    let times: Vec<f64> = idx.iter().map(|&j| points[j].time).collect();
    state.design_rows(b, &subjects, &times)
}

/// Estimates `η̂ ± 1.96 sd` where the variance of every block's contribution
/// is `xᵀ C_b x` and blocks are treated as independent.
pub fn normal_band_predictions(
    state: &ModelState,
    covariances: &[DMatrix<f64>],
    points: &[EvalPoint],
) -> Result<Vec<Prediction>, ModelError> {
    let mut est = vec![0.0; points.len()];
    let mut var = vec![0.0; points.len()];
    for (blocks, idx) in groups(state, points) {
        for b in blocks {
            let rows = design_for(state, b, points, &idx)?;
            let beta = &state.block(b).beta;
            let c = &covariances[b];
            for (r, &j) in idx.iter().enumerate() {
                let (ci, cv) = rows.row(r);
                est[j] += ci.iter().zip(cv).map(|(&a, &v)| v * beta[a]).sum::<f64>();
                let mut v = 0.0;
                for (&a, &va) in ci.iter().zip(cv) {
                    for (&e, &ve) in ci.iter().zip(cv) {
                        v += va * c[(a, e)] * ve;
                    }
                }
                var[j] += v.max(0.0);
            }
        }
    }
    Ok(assemble(state.data(), points, &est, |j| {
        let sd = var[j].sqrt();
        (est[j] - 1.96 * sd, est[j] + 1.96 * sd)
    }))
}

/// Posterior means with 2.5% / 97.5% percentile bands from coefficient
/// draws; `draws[s][b]` holds block `b`'s coefficients of draw `s`.
pub fn sample_predictions(
    state: &ModelState,
    draws: &[Vec<Vec<f64>>],
    points: &[EvalPoint],
) -> Result<Vec<Prediction>, ModelError> {
    let m = points.len();
    let s_count = draws.len();
    // values[j][s]
    let mut values = vec![vec![0.0; s_count]; m];
    for (blocks, idx) in groups(state, points) {
        for b in blocks {
            let rows = design_for(state, b, points, &idx)?;
            for (s, d) in draws.iter().enumerate() {
                for (r, &j) in idx.iter().enumerate() {
                    values[j][s] += rows.row_dot(r, &d[b]);
                }
            }
        }
    }
    let mut est = vec![0.0; m];
    let mut bands = vec![(0.0, 0.0); m];
    for j in 0..m {
        let v = &mut values[j];
        est[j] = v.iter().sum::<f64>() / s_count.max(1) as f64;
        v.sort_by(|a, b| a.total_cmp(b));
        bands[j] = (quantile_sorted(v, 0.025), quantile_sorted(v, 0.975));
    }
    Ok(assemble(state.data(), points, &est, |j| bands[j]))
}

fn assemble<F: Fn(usize) -> (f64, f64)>(data: &JointData, points: &[EvalPoint], est: &[f64], band: F) -> Vec<Prediction> {
    points
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let (lower, upper) = band(j);
            Prediction {
                predictor: p.predictor,
                set: p.set,
                id: data.subjects()[p.subject].id.clone(),
                time: p.time,
                estimate: est[j],
                lower,
                upper,
            }
        })
        .collect()
}
