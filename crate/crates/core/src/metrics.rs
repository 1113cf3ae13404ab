//! Bias, mean-squared error and coverage of pointwise 95% bands, per
//! replicate and averaged over replicates.
//!
//! Every statistic is an average over cells of `η̂ − η`. Overall cells
//! average over all evaluation points of a `(predictor, set)` pair;
//! per-time cells average over the subjects evaluated at one time point and
//! exist for the record set and the survival grid.

use crate::model::Predictor;
use crate::predict::{EvalSet, Prediction};
use crate::simulate::TruthPoint;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no truth for {predictor}/{set} at subject `{id}`, time {time}")]
    MissingTruth {
        predictor: Predictor,
        set: EvalSet,
        id: String,
        time: f64,
    },
    #[error("{predictor}/{set}: {fit} fitted points but {truth} truth points")]
    CountMismatch {
        predictor: Predictor,
        set: EvalSet,
        fit: usize,
        truth: usize,
    },
    #[error("duplicate truth entry for {predictor}/{set} at subject `{id}`, time {time}")]
    DuplicateTruth {
        predictor: Predictor,
        set: EvalSet,
        id: String,
        time: f64,
    },
    #[error("non-finite estimate or truth for {predictor}/{set} at subject `{id}`, time {time}")]
    NonFinite {
        predictor: Predictor,
        set: EvalSet,
        id: String,
        time: f64,
    },
    #[error("cannot aggregate zero replicates")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One aggregation cell. `time` is `None` for the overall average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub predictor: Predictor,
    pub set: EvalSet,
    pub time: Option<f64>,
    pub bias: f64,
    pub mse: f64,
    pub coverage: f64,
    /// Evaluation points in a replicate cell; replicates in an aggregate.
    pub count: usize,
}

/// Metrics of a single fitted replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub cells: Vec<MetricCell>,
}

impl ReplicateMetrics {
    pub fn overall(&self, predictor: Predictor, set: EvalSet) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.predictor == predictor && c.set == set && c.time.is_none())
    }

    pub fn per_time(&self, predictor: Predictor, set: EvalSet) -> Vec<&MetricCell> {
        self.cells
            .iter()
            .filter(|c| c.predictor == predictor && c.set == set && c.time.is_some())
            .collect()
    }

    /// Joins two partial reports (e.g. longitudinal and survival).
    pub fn merge(mut self, other: ReplicateMetrics) -> Self {
        self.cells.extend(other.cells);
        self
    }
}

/// Replicate-averaged metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub replicates: usize,
    pub cells: Vec<MetricCell>,
}

impl MetricsReport {
    pub fn overall(&self, predictor: Predictor, set: EvalSet) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.predictor == predictor && c.set == set && c.time.is_none())
    }

    pub fn per_time(&self, predictor: Predictor, set: EvalSet) -> Vec<&MetricCell> {
        self.cells
            .iter()
            .filter(|c| c.predictor == predictor && c.set == set && c.time.is_some())
            .collect()
    }
}

/// Truth lies in `[lower, upper]`; an edge counts as covered.
pub fn covers(lower: f64, upper: f64, truth: f64) -> bool {
    lower <= truth && truth <= upper
}

type Key = (Predictor, EvalSet, String, u64);

fn key(predictor: Predictor, set: EvalSet, id: &str, time: f64) -> Key {
    (predictor, set, id.to_string(), time.to_bits())
}

#[derive(Default, Clone, Copy)]
struct Acc {
    err: f64,
    sq: f64,
    hit: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, e: f64, covered: bool) {
        self.err += e;
        self.sq += e * e;
        self.hit += covered as u8 as f64;
        self.n += 1;
    }

    fn cell(&self, predictor: Predictor, set: EvalSet, time: Option<f64>) -> MetricCell {
        let n = self.n as f64;
        MetricCell {
            predictor,
            set,
            time,
            bias: self.err / n,
            mse: self.sq / n,
            coverage: self.hit / n,
            count: self.n,
        }
    }
}

/// Metrics for the listed `(predictor, set)` pairs. Every fitted point of a
/// listed pair must have exactly one matching truth point and vice versa.
pub fn replicate_metrics(
    fit: &[Prediction],
    truth: &[TruthPoint],
    pairs: &[(Predictor, EvalSet)],
) -> Result<ReplicateMetrics> {
    let wanted = |k: Predictor, s: EvalSet| pairs.contains(&(k, s));
    let mut lookup: HashMap<Key, f64> = HashMap::new();
    let mut truth_counts: BTreeMap<(Predictor, EvalSet), usize> = BTreeMap::new();
    for t in truth.iter().filter(|t| wanted(t.predictor, t.set)) {
        if lookup.insert(key(t.predictor, t.set, &t.id, t.time), t.value).is_some() {
            return Err(MetricsError::DuplicateTruth {
                predictor: t.predictor,
                set: t.set,
                id: t.id.clone(),
                time: t.time,
            });
        }
        *truth_counts.entry((t.predictor, t.set)).or_default() += 1;
    }

    let mut overall: BTreeMap<(Predictor, EvalSet), Acc> = BTreeMap::new();
    let mut timed: BTreeMap<(Predictor, EvalSet), BTreeMap<u64, (f64, Acc)>> = BTreeMap::new();
    for p in fit.iter().filter(|p| wanted(p.predictor, p.set)) {
        let value = *lookup
            .get(&key(p.predictor, p.set, &p.id, p.time))
            .ok_or_else(|| MetricsError::MissingTruth {
                predictor: p.predictor,
                set: p.set,
                id: p.id.clone(),
                time: p.time,
            })?;
        if !(p.estimate.is_finite() && value.is_finite()) {
            return Err(MetricsError::NonFinite {
                predictor: p.predictor,
                set: p.set,
                id: p.id.clone(),
                time: p.time,
            });
        }
        let e = p.estimate - value;
        let c = covers(p.lower, p.upper, value);
        overall.entry((p.predictor, p.set)).or_default().add(e, c);
        if matches!(p.set, EvalSet::Long | EvalSet::Grid) {
            timed
                .entry((p.predictor, p.set))
                .or_default()
                .entry(p.time.to_bits())
                .or_insert((p.time, Acc::default()))
                .1
                .add(e, c);
        }
    }

    for (&(predictor, set), &n_truth) in &truth_counts {
        let n_fit = overall.get(&(predictor, set)).map_or(0, |a| a.n);
        if n_fit != n_truth {
            return Err(MetricsError::CountMismatch {
                predictor,
                set,
                fit: n_fit,
                truth: n_truth,
            });
        }
    }
    // Fitted pairs with no truth at all were already caught as MissingTruth.

    let mut cells = Vec::new();
    for (&(k, s), acc) in &overall {
        cells.push(acc.cell(k, s, None));
        if let Some(times) = timed.get(&(k, s)) {
            let mut ts: Vec<&(f64, Acc)> = times.values().collect();
            ts.sort_by(|a, b| a.0.total_cmp(&b.0));
            cells.extend(ts.into_iter().map(|(t, a)| a.cell(k, s, Some(*t))));
        }
    }
    Ok(ReplicateMetrics { cells })
}

/// μ and σ at the observed records.
pub fn longitudinal_metrics(fit: &[Prediction], truth: &[TruthPoint]) -> Result<ReplicateMetrics> {
    replicate_metrics(
        fit,
        truth,
        &[(Predictor::Mu, EvalSet::Long), (Predictor::Sigma, EvalSet::Long)],
    )
}

/// λ, γ, α and λ + γ at the follow-up times, plus λ and α over the time
/// grid.
pub fn survival_metrics(fit: &[Prediction], truth: &[TruthPoint]) -> Result<ReplicateMetrics> {
    replicate_metrics(
        fit,
        truth,
        &[
            (Predictor::Lambda, EvalSet::Event),
            (Predictor::Gamma, EvalSet::Event),
            (Predictor::Alpha, EvalSet::Event),
            (Predictor::Lambda, EvalSet::Total),
            (Predictor::Lambda, EvalSet::Grid),
            (Predictor::Alpha, EvalSet::Grid),
        ],
    )
}

/// Both of the above.
pub fn all_metrics(fit: &[Prediction], truth: &[TruthPoint]) -> Result<ReplicateMetrics> {
    Ok(longitudinal_metrics(fit, truth)?.merge(survival_metrics(fit, truth)?))
}

/// Arithmetic means of the per-replicate statistics, cell by cell. A
/// per-time cell absent from some replicates (dropout) is averaged over the
/// replicates that have it; `count` records how many did.
pub fn aggregate(reports: &[ReplicateMetrics]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    type CellKey = (Predictor, EvalSet, Option<u64>);
    let mut sums: BTreeMap<CellKey, (Option<f64>, Acc)> = BTreeMap::new();
    let mut order: Vec<CellKey> = Vec::new();
    for r in reports {
        for c in &r.cells {
            let k = (c.predictor, c.set, c.time.map(f64::to_bits));
            let slot = sums.entry(k).or_insert_with(|| {
                order.push(k);
                (c.time, Acc::default())
            });
            slot.1.err += c.bias;
            slot.1.sq += c.mse;
            slot.1.hit += c.coverage;
            slot.1.n += 1;
        }
    }
    // Overall rows first, then time-ordered per-time rows, per pair.
    order.sort_by(|a, b| {
        (a.0, a.1)
            .cmp(&(b.0, b.1))
            .then_with(|| match (a.2, b.2) {
                (None, None) => std::cmp::Ordering::Equal,
                (None, Some(_)) => std::cmp::Ordering::Less,
                (Some(_), None) => std::cmp::Ordering::Greater,
                (Some(x), Some(y)) => f64::from_bits(x).total_cmp(&f64::from_bits(y)),
            })
    });
    let cells = order
        .iter()
        .map(|k| {
            let (time, acc) = sums[k];
            acc.cell(k.0, k.1, time)
        })
        .collect();
    Ok(MetricsReport {
        replicates: reports.len(),
        cells,
    })
}
