//! CSV input/output and run manifests.
//!
//! Longitudinal file: `id,time,y,<covariates...>`. Survival file:
//! `id,T,delta,<covariates...>`. UTF-8, `.` as decimal separator, header
//! row mandatory. Covariate columns of the longitudinal file must be
//! constant within a subject; they are merged into the subject's baseline
//! covariates. Line numbers in errors count the header as line 1.

use crate::model::{DataError, JointData, LongRecord, Predictor, SubjectRecord};
use crate::predict::EvalSet;
use crate::simulate::TruthPoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}, line {line}: column `{column}`: cannot parse `{value}` as a number")]
    BadNumber {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
    #[error("{path}, line {line}: delta must be 0 or 1 (got `{value}`)")]
    BadDelta { path: PathBuf, line: u64, value: String },
    #[error("{path}, line {line}: subject `{id}` has no survival record")]
    UnknownSubject { path: PathBuf, line: u64, id: String },
    #[error("{path}, line {line}: subject `{id}` appears twice")]
    DuplicateSubject { path: PathBuf, line: u64, id: String },
    #[error("{path}, line {line}: subject `{id}`: measurement time {time} exceeds follow-up time {follow_up}")]
    AfterFollowUp {
        path: PathBuf,
        line: u64,
        id: String,
        time: f64,
        follow_up: f64,
    },
    #[error("{path}, line {line}: subject `{id}`: covariate `{column}` is not constant over the subject's records")]
    InconsistentCovariate {
        path: PathBuf,
        line: u64,
        id: String,
        column: String,
    },
    #[error("{path}, line {line}: {message}")]
    Invalid { path: PathBuf, line: u64, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A parsed CSV table: header plus `(line, fields)` rows.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_err(path))?;
        let header: Vec<String> = rdr.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err(path))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    fn number(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<f64> {
        let raw = rec.get(col).unwrap_or("");
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| IoError::BadNumber {
                path: self.path.clone(),
                line,
                column: self.header[col].clone(),
                value: raw.to_string(),
            })
    }
}

/// Reads and validates a longitudinal/survival file pair.
pub fn load_data(long_path: &Path, surv_path: &Path) -> Result<JointData> {
    let surv = Table::read(surv_path)?;
    let (c_id, c_t, c_d) = (surv.column("id")?, surv.column("T")?, surv.column("delta")?);
    let mut subjects = Vec::with_capacity(surv.rows.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    for (line, rec) in &surv.rows {
        let id = rec.get(c_id).unwrap_or("").to_string();
        if index.insert(id.clone(), subjects.len()).is_some() {
            return Err(IoError::DuplicateSubject {
                path: surv.path.clone(),
                line: *line,
                id,
            });
        }
        let time = surv.number(*line, rec, c_t)?;
        if time <= 0.0 {
            return Err(IoError::Invalid {
                path: surv.path.clone(),
                line: *line,
                message: format!("follow-up time must be positive (got {time})"),
            });
        }
        let event = match rec.get(c_d).unwrap_or("") {
            "0" => false,
            "1" => true,
            other => {
                return Err(IoError::BadDelta {
                    path: surv.path.clone(),
                    line: *line,
                    value: other.to_string(),
                })
            }
        };
        let mut covariates = BTreeMap::new();
        for (c, name) in surv.header.iter().enumerate() {
            if c != c_id && c != c_t && c != c_d {
                covariates.insert(name.clone(), surv.number(*line, rec, c)?);
            }
        }
        subjects.push(SubjectRecord {
            id,
            time,
            event,
            covariates,
        });
    }

    let long = Table::read(long_path)?;
    let (l_id, l_t, l_y) = (long.column("id")?, long.column("time")?, long.column("y")?);
    let extra: Vec<usize> = (0..long.header.len()).filter(|c| ![l_id, l_t, l_y].contains(c)).collect();
    let mut seen: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); subjects.len()];
    let mut records = Vec::with_capacity(long.rows.len());
    for (line, rec) in &long.rows {
        let id = rec.get(l_id).unwrap_or("");
        let &i = index.get(id).ok_or_else(|| IoError::UnknownSubject {
            path: long.path.clone(),
            line: *line,
            id: id.to_string(),
        })?;
        let time = long.number(*line, rec, l_t)?;
        let y = long.number(*line, rec, l_y)?;
        if time > subjects[i].time {
            return Err(IoError::AfterFollowUp {
                path: long.path.clone(),
                line: *line,
                id: id.to_string(),
                time,
                follow_up: subjects[i].time,
            });
        }
        for &c in &extra {
            let name = &long.header[c];
            let v = long.number(*line, rec, c)?;
            let prev = seen[i].get(name).copied().or_else(|| subjects[i].covariates.get(name).copied());
            if prev.is_some_and(|p| p.to_bits() != v.to_bits()) {
                return Err(IoError::InconsistentCovariate {
                    path: long.path.clone(),
                    line: *line,
                    id: id.to_string(),
                    column: name.clone(),
                });
            }
            seen[i].insert(name.clone(), v);
        }
        records.push(LongRecord { subject: i, time, y });
    }
    for (s, extra) in subjects.iter_mut().zip(seen) {
        s.covariates.extend(extra);
    }
    Ok(JointData::new(subjects, records)?)
}

/// Writes `data` so that [`load_data`] reproduces it exactly: subject
/// covariates go to the survival file, floats use the shortest
/// round-tripping representation.
pub fn write_data(data: &JointData, long_path: &Path, surv_path: &Path) -> Result<()> {
    let names: Vec<String> = data
        .subjects()
        .first()
        .map(|s| s.covariates.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_path(surv_path).map_err(csv_err(surv_path))?;
    let mut header = vec!["id".to_string(), "T".into(), "delta".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err(surv_path))?;
    for s in data.subjects() {
        let mut row = vec![s.id.clone(), s.time.to_string(), (s.event as u8).to_string()];
        for n in &names {
            row.push(s.covariates.get(n).copied().unwrap_or(f64::NAN).to_string());
        }
        w.write_record(&row).map_err(csv_err(surv_path))?;
    }
    w.flush().map_err(io_err(surv_path))?;

    let mut w = csv::Writer::from_path(long_path).map_err(csv_err(long_path))?;
    w.write_record(["id", "time", "y"]).map_err(csv_err(long_path))?;
    for r in data.records() {
        w.write_record([data.subjects()[r.subject].id.clone(), r.time.to_string(), r.y.to_string()])
            .map_err(csv_err(long_path))?;
    }
    w.flush().map_err(io_err(long_path))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    predictor: String,
    set: String,
    id: String,
    time: f64,
    value: f64,
}

pub fn write_truth(points: &[TruthPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for p in points {
        w.serialize(TruthRow {
            predictor: p.predictor.name().into(),
            set: p.set.name().into(),
            id: p.id.clone(),
            time: p.time,
            value: p.value,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthPoint>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<TruthRow>() {
        let r = rec.map_err(csv_err(path))?;
        let invalid = |message: String| IoError::Invalid {
            path: path.to_path_buf(),
            line: out.len() as u64 + 2,
            message,
        };
        let predictor = Predictor::from_name(&r.predictor).ok_or_else(|| invalid(format!("unknown predictor `{}`", r.predictor)))?;
        let set: EvalSet = r.set.parse().map_err(invalid)?;
        out.push(TruthPoint {
            predictor,
            set,
            id: r.id,
            time: r.time,
            value: r.value,
        });
    }
    Ok(out)
}

/// Long-format CSV of any serializable rows.
pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Written beside every run's outputs: enough to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, args: &[String], config: serde_json::Value, seed: Option<u64>) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert(env!("CARGO_PKG_NAME").to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("manifest".into(), "1".into());
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            config,
            seed,
            versions,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_json(self, &path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{assemble_dataset, SimSetting};

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_pair() {
        let d = tempfile::tempdir().unwrap();
        let l = write(d.path(), "l.csv", "id,time,y\na,0.5,1.2\n");
        let s = write(d.path(), "s.csv", "id,T,delta,x1\na,3,1,0.25\n");
        let data = load_data(&l, &s).unwrap();
        assert_eq!((data.n(), data.n_obs()), (1, 1));
        assert_eq!(data.covariate(0, "x1").unwrap(), 0.25);
    }

    #[test]
    fn validation_errors_cite_lines() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "s.csv", "id,T,delta\na,3,1\nb,2,0\n");
        let l = write(d.path(), "l.csv", "id,time,y\na,0,1\nb,2.5,1\n");
        let e = load_data(&l, &s).unwrap_err();
        assert!(matches!(e, IoError::AfterFollowUp { line: 3, .. }), "{e}");
        assert!(e.to_string().contains("line 3"));

        let l = write(d.path(), "l.csv", "id,time,y\nzz,0,1\n");
        assert!(matches!(load_data(&l, &s), Err(IoError::UnknownSubject { line: 2, .. })));

        let bad = write(d.path(), "s2.csv", "id,T,delta\na,3,2\n");
        assert!(matches!(load_data(&l, &bad), Err(IoError::BadDelta { line: 2, .. })));

        let nocol = write(d.path(), "s3.csv", "id,T\na,3\n");
        assert!(matches!(load_data(&l, &nocol), Err(IoError::MissingColumn { .. })));

        let l = write(d.path(), "l.csv", "id,time,y,x\na,0,1,1\na,1,1,2\n");
        assert!(matches!(
            load_data(&l, &s),
            Err(IoError::InconsistentCovariate { line: 3, .. })
        ));
    }

    #[test]
    fn repeated_assays_allowed() {
        let d = tempfile::tempdir().unwrap();
        let s = write(d.path(), "s.csv", "id,T,delta\na,3,1\n");
        let l = write(d.path(), "l.csv", "id,time,y,x\na,1,1,5\na,1,2,5\n");
        let data = load_data(&l, &s).unwrap();
        assert_eq!(data.n_obs(), 2);
        assert_eq!(data.covariate(0, "x").unwrap(), 5.0);
    }

    #[test]
    fn simulated_round_trip_is_bitwise() {
        let sim = assemble_dataset(&SimSetting::preset("1a-mini", 4).unwrap()).unwrap();
        let d = tempfile::tempdir().unwrap();
        let (l, s) = (d.path().join("longitudinal.csv"), d.path().join("survival.csv"));
        write_data(&sim.data, &l, &s).unwrap();
        assert_eq!(load_data(&l, &s).unwrap(), sim.data);

        let truth = sim.truth_table();
        let t = d.path().join("truth.csv");
        write_truth(&truth, &t).unwrap();
        assert_eq!(read_truth(&t).unwrap(), truth);
    }
}
