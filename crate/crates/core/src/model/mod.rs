//! Model description (terms of the five predictors), data containers, design
//! blocks and the cached model state.

mod block;
mod data;
mod state;

pub use block::{BlockPrior, DesignBlock, TermBasis, TermDesign, TIME_REFERENCE_POINTS, VAGUE_PRIOR_VARIANCE};
pub use data::{DataError, JointData, LongRecord, SubjectRecord};
pub use state::{build_blocks, ModelState, PointSet, RowValues};

use crate::basis::BasisError;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// The five additive predictors of the joint model.
///
/// `Lambda` (log baseline hazard and other time-varying survival effects),
/// `Gamma` (baseline survival covariates), `Alpha` (association between the
/// marker and the hazard), `Mu` (marker mean) and `Sigma` (log error sd).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Predictor {
    Lambda,
    Gamma,
    Alpha,
    Mu,
    Sigma,
}

impl Predictor {
    pub const ALL: [Predictor; 5] = [
        Predictor::Lambda,
        Predictor::Gamma,
        Predictor::Alpha,
        Predictor::Mu,
        Predictor::Sigma,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Predictor::Lambda => "lambda",
            Predictor::Gamma => "gamma",
            Predictor::Alpha => "alpha",
            Predictor::Mu => "mu",
            Predictor::Sigma => "sigma",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Predictors evaluated over time inside the hazard.
    pub fn is_time_varying(self) -> bool {
        matches!(self, Predictor::Lambda | Predictor::Alpha | Predictor::Mu)
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Knot count, degree and difference order of a P-spline term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSettings {
    /// Total number of knots including the replicated boundary knots.
    pub n_knots: usize,
    pub degree: usize,
    pub diff_order: usize,
}

impl SplineSettings {
    pub fn cubic(n_knots: usize) -> Self {
        Self {
            n_knots,
            degree: 3,
            diff_order: 2,
        }
    }

    /// Basis dimension before any constraint.
    pub fn n_basis(&self) -> usize {
        self.n_knots.saturating_sub(self.degree + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermKind {
    Intercept,
    Linear { covariate: String },
    Smooth { covariate: String, spline: SplineSettings },
    SmoothTime { spline: SplineSettings },
    RandomIntercept { group: String },
    FunctionalRandomIntercept { group: String, spline: SplineSettings },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub predictor: Predictor,
    pub kind: TermKind,
    /// Apply the sum-to-zero constraint to the (time) spline basis.
    pub constrained: bool,
}

impl TermSpec {
    pub fn new(predictor: Predictor, kind: TermKind) -> Self {
        let constrained = matches!(
            kind,
            TermKind::Smooth { .. }
                | TermKind::SmoothTime { .. }
                | TermKind::FunctionalRandomIntercept { .. }
        );
        Self {
            predictor,
            kind,
            constrained,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let time_only = matches!(
            self.kind,
            TermKind::SmoothTime { .. } | TermKind::FunctionalRandomIntercept { .. }
        );
        if time_only && !self.predictor.is_time_varying() {
            return Err(ModelError::InvalidTerm(format!(
                "{} is time-constant; time-varying terms are not allowed there",
                self.predictor
            )));
        }
        let spline = match &self.kind {
            TermKind::Smooth { spline, .. }
            | TermKind::SmoothTime { spline }
            | TermKind::FunctionalRandomIntercept { spline, .. } => Some(spline),
            _ => None,
        };
        if let Some(s) = spline {
            let d = s.n_basis();
            if s.n_knots < 2 * (s.degree + 1) || d < 2 {
                return Err(ModelError::InvalidTerm(format!(
                    "{} knots are too few for a degree-{} spline",
                    s.n_knots, s.degree
                )));
            }
            if s.diff_order == 0 || s.diff_order >= d {
                return Err(ModelError::InvalidTerm(format!(
                    "difference order {} invalid for {} basis functions",
                    s.diff_order, d
                )));
            }
        }
        Ok(())
    }

    /// Short human-readable label, e.g. `mu:s(time)`.
    pub fn label(&self) -> String {
        let body = match &self.kind {
            TermKind::Intercept => "(Intercept)".to_string(),
            TermKind::Linear { covariate } => format!("lin({covariate})"),
            TermKind::Smooth { covariate, .. } => format!("s({covariate})"),
            TermKind::SmoothTime { .. } => "s(time)".to_string(),
            TermKind::RandomIntercept { group } => format!("ri({group})"),
            TermKind::FunctionalRandomIntercept { group, .. } => format!("fri({group},time)"),
        };
        format!("{}:{}", self.predictor, body)
    }
}

/// Declarative description of all terms of all predictors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelSpec {
    pub terms: Vec<TermSpec>,
}

impl ModelSpec {
    pub fn new(terms: Vec<TermSpec>) -> Self {
        Self { terms }
    }

    pub fn terms_of(&self, k: Predictor) -> impl Iterator<Item = &TermSpec> {
        self.terms.iter().filter(move |t| t.predictor == k)
    }

    /// The specification used for the simulation study: P-splines with 10
    /// knots in the survival part, 12 knots for the marker trajectories.
    pub fn simulation_default(time_varying_alpha: bool) -> Self {
        use Predictor::*;
        use TermKind::*;
        let mut terms = vec![
            TermSpec::new(Lambda, SmoothTime { spline: SplineSettings::cubic(10) }),
            TermSpec::new(Gamma, Intercept),
            TermSpec::new(
                Gamma,
                Smooth {
                    covariate: "x1".into(),
                    spline: SplineSettings::cubic(10),
                },
            ),
            TermSpec::new(Alpha, Intercept),
        ];
        if time_varying_alpha {
            terms.push(TermSpec::new(Alpha, SmoothTime { spline: SplineSettings::cubic(10) }));
        }
        terms.extend([
            TermSpec::new(Mu, Intercept),
            TermSpec::new(Mu, SmoothTime { spline: SplineSettings::cubic(12) }),
            TermSpec::new(Mu, RandomIntercept { group: "id".into() }),
            TermSpec::new(
                Mu,
                FunctionalRandomIntercept {
                    group: "id".into(),
                    spline: SplineSettings::cubic(12),
                },
            ),
            TermSpec::new(
                Mu,
                Smooth {
                    covariate: "x2".into(),
                    spline: SplineSettings::cubic(10),
                },
            ),
            TermSpec::new(Sigma, Intercept),
        ]);
        Self { terms }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("grouping variable `{0}` has a single level; random effects are degenerate")]
    DegenerateGroup(String),
    #[error("grouping by `{0}` is not supported; random effects group by the subject identifier `id`")]
    UnsupportedGroup(String),
    #[error("invalid term: {0}")]
    InvalidTerm(String),
    #[error("variance parameter must be positive (got {0})")]
    NonPositiveVariance(f64),
    #[error("block index {0} out of range")]
    NoSuchBlock(usize),
    #[error("coefficient length mismatch for block {block}: expected {expected}, got {actual}")]
    CoefficientLength {
        block: String,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Data(#[from] DataError),
}
