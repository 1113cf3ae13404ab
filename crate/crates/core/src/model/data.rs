use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("no subjects in survival data")]
    Empty,
    #[error("duplicate survival record for subject `{0}`")]
    DuplicateSubject(String),
    #[error("longitudinal record for subject `{0}` has no survival record")]
    MissingSurvival(String),
    #[error("subject `{id}`: measurement time {time} exceeds follow-up time {follow_up}")]
    AfterFollowUp { id: String, time: f64, follow_up: f64 },
    #[error("subject `{id}`: follow-up time {time} must be positive and finite")]
    BadFollowUp { id: String, time: f64 },
    #[error("subject `{id}`: non-finite value in {what}")]
    NonFinite { id: String, what: String },
    #[error("subject `{id}` lacks covariate `{covariate}`")]
    MissingCovariate { id: String, covariate: String },
}

/// One subject's survival outcome and baseline covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    /// Follow-up time `T_i` (event or censoring).
    pub time: f64,
    pub event: bool,
    pub covariates: BTreeMap<String, f64>,
}

/// One longitudinal measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    /// Index into [`JointData::subjects`].
    pub subject: usize,
    pub time: f64,
    pub y: f64,
}

/// Paired longitudinal and survival data.
///
/// Records are stored sorted by subject, then time (stable for ties), so
/// every subject's measurements form a contiguous range.
#[derive(Debug, Clone, PartialEq)]
pub struct JointData {
    subjects: Vec<SubjectRecord>,
    records: Vec<LongRecord>,
    ranges: Vec<Range<usize>>,
    index: HashMap<String, usize>,
}

impl JointData {
    pub fn new(subjects: Vec<SubjectRecord>, mut records: Vec<LongRecord>) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::Empty);
        }
        let mut index = HashMap::with_capacity(subjects.len());
        for (i, s) in subjects.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(DataError::DuplicateSubject(s.id.clone()));
            }
            if !(s.time.is_finite() && s.time > 0.0) {
                return Err(DataError::BadFollowUp {
                    id: s.id.clone(),
                    time: s.time,
                });
            }
            if s.covariates.values().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    id: s.id.clone(),
                    what: "covariates".into(),
                });
            }
        }
        for r in &records {
            let s = subjects
                .get(r.subject)
                .ok_or_else(|| DataError::MissingSurvival(format!("#{}", r.subject)))?;
            if !(r.time.is_finite() && r.y.is_finite()) {
                return Err(DataError::NonFinite {
                    id: s.id.clone(),
                    what: "longitudinal record".into(),
                });
            }
            if r.time > s.time {
                return Err(DataError::AfterFollowUp {
                    id: s.id.clone(),
                    time: r.time,
                    follow_up: s.time,
                });
            }
        }
        records.sort_by(|a, b| a.subject.cmp(&b.subject).then(a.time.total_cmp(&b.time)));
        let mut ranges = vec![0..0; subjects.len()];
        let mut start = 0;
        while start < records.len() {
            let s = records[start].subject;
            let mut end = start;
            while end < records.len() && records[end].subject == s {
                end += 1;
            }
            ranges[s] = start..end;
            start = end;
        }
        for (i, r) in ranges.iter_mut().enumerate() {
            if r.start == r.end {
                // keep empty ranges positioned so they are still ordered
                let pos = records.partition_point(|rec| rec.subject < i);
                *r = pos..pos;
            }
        }
        Ok(Self {
            subjects,
            records,
            ranges,
            index,
        })
    }

    /// Number of subjects `n`.
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Number of longitudinal records `N`.
    pub fn n_obs(&self) -> usize {
        self.records.len()
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn records(&self) -> &[LongRecord] {
        &self.records
    }

    pub fn subject_range(&self, i: usize) -> Range<usize> {
        self.ranges[i].clone()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn covariate(&self, i: usize, name: &str) -> Result<f64, DataError> {
        self.subjects[i]
            .covariates
            .get(name)
            .copied()
            .ok_or_else(|| DataError::MissingCovariate {
                id: self.subjects[i].id.clone(),
                covariate: name.to_string(),
            })
    }

    pub fn has_covariate(&self, name: &str) -> bool {
        self.subjects.iter().all(|s| s.covariates.contains_key(name))
    }

    pub fn follow_up(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.time).collect()
    }

    pub fn events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// Subjects without any longitudinal record.
    pub fn subjects_without_records(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.ranges[i].is_empty()).collect()
    }

    /// `[min(0, min t_ij), max T_i]`: the interval every time basis spans.
    pub fn time_range(&self) -> (f64, f64) {
        let lo = self
            .records
            .iter()
            .map(|r| r.time)
            .fold(0.0_f64, f64::min);
        let hi = self.subjects.iter().map(|s| s.time).fold(f64::MIN, f64::max);
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, t: f64) -> SubjectRecord {
        SubjectRecord {
            id: id.into(),
            time: t,
            event: true,
            covariates: BTreeMap::new(),
        }
    }

    #[test]
    fn records_are_grouped_per_subject() {
        let d = JointData::new(
            vec![subject("a", 5.0), subject("b", 3.0), subject("c", 1.0)],
            vec![
                LongRecord { subject: 1, time: 2.0, y: 0.0 },
                LongRecord { subject: 0, time: 1.0, y: 0.0 },
                LongRecord { subject: 1, time: 1.0, y: 0.0 },
            ],
        )
        .unwrap();
        assert_eq!(d.subject_range(0), 0..1);
        assert_eq!(d.subject_range(1), 1..3);
        assert!(d.subject_range(2).is_empty());
        assert_eq!(d.records()[1].time, 1.0);
        assert_eq!(d.subjects_without_records(), vec![2]);
    }

    #[test]
    fn measurement_after_follow_up_is_rejected() {
        let err = JointData::new(
            vec![subject("a", 1.0)],
            vec![LongRecord { subject: 0, time: 2.0, y: 0.0 }],
        )
        .unwrap_err();
        assert!(matches!(err, DataError::AfterFollowUp { .. }));
    }
}
