//! Patient records and datasets, plus their JSONL / JSON file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::model::{ModelParams, ModelParts};

/// Binary bag-of-words record. `a` mirrors `x` at the anchor columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub id: String,
    pub x: Vec<bool>,
    pub a: Vec<bool>,
    /// True condition labels, only for synthetic or labeled corpora.
    pub y: Option<Vec<bool>>,
}

impl PatientRecord {
    pub fn new(id: String, x: Vec<bool>, anchor_index: &[usize], y: Option<Vec<bool>>) -> Self {
        let a = anchor_index.iter().map(|&j| x[j]).collect();
        Self { id, x, a, y }
    }

    pub fn n_positive_labels(&self) -> Option<usize> {
        self.y.as_ref().map(|y| y.iter().filter(|&&v| v).count())
    }
}

/// Shape and naming shared by every record of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    pub m: usize,
    pub n: usize,
    pub anchor_index: Vec<usize>,
    pub condition_names: Vec<String>,
    pub feature_names: Vec<String>,
}

impl DatasetMeta {
    pub const VERSION: u32 = 1;

    pub fn from_model(model: &ModelParams) -> Self {
        Self {
            version: Self::VERSION,
            m: model.m(),
            n: model.n(),
            anchor_index: model.anchor_index().to_vec(),
            condition_names: model.condition_names().to_vec(),
            feature_names: model.feature_names().to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("meta anchor_index", self.m, self.anchor_index.len())?;
        check_len("meta condition_names", self.m, self.condition_names.len())?;
        check_len("meta feature_names", self.n, self.feature_names.len())?;
        let mut seen = vec![false; self.n];
        for &j in &self.anchor_index {
            check_index("anchor column", j, self.n)?;
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::Data(format!("anchor column {j} used twice")));
            }
        }
        Ok(())
    }

    /// A structurally valid network with this shape: priors and leaks 0.5,
    /// no edges except each anchor's own parent.
    pub fn template_model(&self) -> Result<ModelParams> {
        self.validate()?;
        let mut failures = vec![1.0; self.m * self.n];
        for (i, &j) in self.anchor_index.iter().enumerate() {
            failures[i * self.n + j] = 0.5;
        }
        ModelParams::new(ModelParts {
            priors: vec![0.5; self.m],
            leaks: vec![0.5; self.n],
            failures,
            anchor_index: self.anchor_index.clone(),
            condition_names: self.condition_names.clone(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Errors unless `model` has this shape and naming.
    pub fn check_model(&self, model: &ModelParams) -> Result<()> {
        if Self::from_model(model) != *self {
            return Err(Error::Data(format!(
                "model ({} conditions, {} features) does not match the dataset ({} conditions, {} features) or its names",
                model.m(),
                model.n(),
                self.m,
                self.n
            )));
        }
        Ok(())
    }

    pub fn is_anchor_column(&self, j: usize) -> bool {
        self.anchor_index.contains(&j)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<PatientRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    /// indices of observations that are on
    x: Vec<usize>,
    /// indices of conditions whose anchor is on
    a: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Vec<usize>>,
}

fn on_indices(v: &[bool]) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect()
}

fn from_indices(what: &'static str, idx: &[usize], len: usize) -> Result<Vec<bool>> {
    let mut v = vec![false; len];
    for &i in idx {
        check_index(what, i, len)?;
        v[i] = true;
    }
    Ok(v)
}

impl Dataset {
    pub fn new(meta: DatasetMeta, records: Vec<PatientRecord>) -> Self {
        Self { meta, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.y.is_some())
    }

    /// Copy sharing the same meta with a subset of records.
    pub fn with_records(&self, records: Vec<PatientRecord>) -> Self {
        Self {
            meta: self.meta.clone(),
            records,
        }
    }

    /// Splits off the last `n_validation` records.
    pub fn split_validation(&self, n_validation: usize) -> Result<(Dataset, Dataset)> {
        if self.records.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        if n_validation >= self.records.len() {
            return Err(Error::Data(format!(
                "validation split of {n_validation} records needs a larger dataset than {}",
                self.records.len()
            )));
        }
        let cut = self.records.len() - n_validation;
        Ok((
            self.with_records(self.records[..cut].to_vec()),
            self.with_records(self.records[cut..].to_vec()),
        ))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            let line = RecordLine {
                id: r.id.clone(),
                x: on_indices(&r.x),
                a: on_indices(&r.a),
                y: r.y.as_deref().map(on_indices),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, meta: DatasetMeta) -> Result<Self> {
        meta.validate()?;
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            let x = from_indices("observation", &parsed.x, meta.n)?;
            let y = match parsed.y {
                Some(y) => Some(from_indices("condition", &y, meta.m)?),
                None => None,
            };
            let record = PatientRecord::new(parsed.id, x, &meta.anchor_index, y);
            if on_indices(&record.a) != parsed.a {
                return Err(Error::Data(format!(
                    "{}:{}: anchor vector disagrees with x at anchor columns",
                    path.display(),
                    lineno + 1
                )));
            }
            records.push(record);
        }
        Ok(Self { meta, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            version: 1,
            m: 2,
            n: 4,
            anchor_index: vec![2, 3],
            condition_names: vec!["c0".into(), "c1".into()],
            feature_names: vec![
                "f0".into(),
                "f1".into(),
                "anchor:c0".into(),
                "anchor:c1".into(),
            ],
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let m = meta();
        let records = vec![
            PatientRecord::new(
                "a".into(),
                vec![true, false, true, false],
                &m.anchor_index,
                Some(vec![true, true]),
            ),
            PatientRecord::new(
                "b".into(),
                vec![false, false, false, true],
                &m.anchor_index,
                Some(vec![false, true]),
            ),
        ];
        let ds = Dataset::new(m.clone(), records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write_jsonl(&path).unwrap();
        let back = Dataset::read_jsonl(&path, m).unwrap();
        assert_eq!(back.records, ds.records);
        assert_eq!(back.records[0].a, vec![true, false]);
    }

    #[test]
    fn rejects_inconsistent_anchor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"id\":\"z\",\"x\":[0,2],\"a\":[1]}\n").unwrap();
        assert!(Dataset::read_jsonl(&path, meta()).is_err());
    }

    #[test]
    fn validation_split_bounds() {
        let m = meta();
        let r = PatientRecord::new("a".into(), vec![false; 4], &m.anchor_index, None);
        let ds = Dataset::new(m, vec![r.clone(), r.clone(), r]);
        let (train, val) = ds.split_validation(1).unwrap();
        assert_eq!((train.len(), val.len()), (2, 1));
        assert!(ds.split_validation(3).is_err());
        assert!(ds.with_records(vec![]).split_validation(0).is_err());
    }
}
