//! Versioned JSON model documents.
//!
//! Failures are written either as a dense row-major array or as sparse
//! `[i, j, f]` triplets listing only entries below 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_index, Error, Result};
use crate::model::{ModelParams, ModelParts, NoiseModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FailureMatrix {
    Dense(Vec<f64>),
    Sparse(Vec<(usize, usize, f64)>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub version: u32,
    pub m: usize,
    pub n: usize,
    pub condition_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub priors: Vec<f64>,
    pub leaks: Vec<f64>,
    pub failures: FailureMatrix,
    pub anchor_index: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_model: Option<NoiseModel>,
}

impl ModelDocument {
    pub fn from_params(params: &ModelParams, noise: Option<&NoiseModel>, sparse: bool) -> Self {
        let failures = if sparse {
            let n = params.n();
            FailureMatrix::Sparse(
                params
                    .failures()
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f != 1.0)
                    .map(|(k, &f)| (k / n, k % n, f))
                    .collect(),
            )
        } else {
            FailureMatrix::Dense(params.failures().to_vec())
        };
        Self {
            version: MODEL_FORMAT_VERSION,
            m: params.m(),
            n: params.n(),
            condition_names: params.condition_names().to_vec(),
            feature_names: params.feature_names().to_vec(),
            priors: params.priors().to_vec(),
            leaks: params.leaks().to_vec(),
            failures,
            anchor_index: params.anchor_index().to_vec(),
            noise_model: noise.cloned(),
        }
    }

    /// Validates every model invariant and returns the parameters.
    pub fn into_params(self) -> Result<(ModelParams, Option<NoiseModel>)> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model version {} (expected {MODEL_FORMAT_VERSION})",
                self.version
            )));
        }
        if self.priors.len() != self.m || self.leaks.len() != self.n {
            return Err(Error::Data(format!(
                "declared shape {}x{} disagrees with priors/leaks lengths {}/{}",
                self.m,
                self.n,
                self.priors.len(),
                self.leaks.len()
            )));
        }
        let failures = match self.failures {
            FailureMatrix::Dense(v) => v,
            FailureMatrix::Sparse(triplets) => {
                let mut v = vec![1.0; self.m * self.n];
                for (i, j, f) in triplets {
                    check_index("failure row", i, self.m)?;
                    check_index("failure column", j, self.n)?;
                    v[i * self.n + j] = f;
                }
                v
            }
        };
        let params = ModelParams::new(ModelParts {
            priors: self.priors,
            leaks: self.leaks,
            failures,
            anchor_index: self.anchor_index,
            condition_names: self.condition_names,
            feature_names: self.feature_names,
        })?;
        if let Some(noise) = &self.noise_model {
            if noise.len() != params.m() {
                return Err(Error::Data(format!(
                    "noise model has {} entries for {} conditions",
                    noise.len(),
                    params.m()
                )));
            }
            for i in noise.unidentifiable() {
                log::warn!(
                    "condition '{}' has unidentifiable anchor noise rates",
                    params.condition_names()[i]
                );
            }
        }
        Ok((params, self.noise_model))
    }
}

pub fn write_model(
    path: &Path,
    params: &ModelParams,
    noise: Option<&NoiseModel>,
    sparse: bool,
) -> Result<()> {
    let doc = ModelDocument::from_params(params, noise, sparse);
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(ModelParams, Option<NoiseModel>)> {
    let doc: ModelDocument = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    doc.into_params()
}

pub fn parse_model(bytes: &[u8]) -> Result<(ModelParams, Option<NoiseModel>)> {
    let doc: ModelDocument = serde_json::from_slice(bytes)?;
    doc.into_params()
}

/// Reads only the `noise_model` field of any JSON document carrying one
/// (model files, ground-truth sidecars, standalone noise files).
pub fn read_noise(path: &Path) -> Result<NoiseModel> {
    #[derive(Deserialize)]
    struct NoiseOnly {
        noise_model: Option<NoiseModel>,
    }
    let doc: NoiseOnly = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let noise = doc
        .noise_model
        .ok_or_else(|| Error::Data(format!("{} has no noise_model", path.display())))?;
    NoiseModel::new(noise.rates().to_vec())
}

pub fn write_noise(path: &Path, noise: &NoiseModel) -> Result<()> {
    #[derive(Serialize)]
    struct NoiseOnly<'a> {
        noise_model: &'a NoiseModel,
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &NoiseOnly { noise_model: noise })?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseRates;

    fn params() -> ModelParams {
        ModelParams::new(ModelParts {
            priors: vec![0.3, 0.2],
            leaks: vec![0.3, 0.1, 0.05],
            failures: vec![0.1, 0.5, 1.0, 0.2, 1.0, 0.4],
            anchor_index: vec![1, 2],
            condition_names: vec!["a".into(), "b".into()],
            feature_names: vec!["x0".into(), "x1".into(), "x2".into()],
        })
        .unwrap()
    }

    #[test]
    fn dense_and_sparse_roundtrip_bit_exact() {
        let noise = NoiseModel::uniform(2, NoiseRates::new(0.8, 0.05)).unwrap();
        let p = params();
        let dir = tempfile::tempdir().unwrap();
        for sparse in [false, true] {
            let path = dir.path().join(format!("m{sparse}.json"));
            write_model(&path, &p, Some(&noise), sparse).unwrap();
            let (back, back_noise) = read_model(&path).unwrap();
            assert_eq!(back, p);
            assert_eq!(back_noise.unwrap(), noise);
        }
        let noise_back = read_noise(&dir.path().join("mtrue.json")).unwrap();
        assert_eq!(noise_back, noise);
    }

    #[test]
    fn loader_rejects_broken_invariants() {
        let mut doc = ModelDocument::from_params(&params(), None, false);
        doc.priors[0] = 1.2;
        assert!(doc.into_params().is_err());

        let mut doc = ModelDocument::from_params(&params(), None, true);
        if let FailureMatrix::Sparse(t) = &mut doc.failures {
            t.push((0, 2, 0.5)); // second parent on an anchor column
        }
        assert!(doc.into_params().is_err());

        let mut doc = ModelDocument::from_params(&params(), None, false);
        doc.version = 99;
        assert!(doc.into_params().is_err());

        let text =
            serde_json::to_string(&ModelDocument::from_params(&params(), None, false)).unwrap();
        let with_extra = text.replacen('{', "{\"bogus\":1,", 1);
        assert!(parse_model(with_extra.as_bytes()).is_err());
    }
}
