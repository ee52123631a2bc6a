//! Synthetic corpora drawn from known ground-truth networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelParts, NoiseModel, NoiseRates};
use crate::record::{Dataset, DatasetMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    /// conditions
    pub m: usize,
    /// observation columns, anchors included
    pub n: usize,
    pub prior_range: (f64, f64),
    /// probability that a condition is a parent of a non-anchor observation
    pub failure_density: f64,
    pub failure_range: (f64, f64),
    pub leak_range: (f64, f64),
    /// P(A = 0 | Y = 1), shared by all anchors unless `noise_rates` is set
    pub anchor_false_negative: f64,
    /// P(A = 1 | Y = 0)
    pub anchor_false_positive: f64,
    pub noise_rates: Option<Vec<NoiseRates>>,
    pub n_records: usize,
    pub seed: u64,
    pub cohort_min: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            m: 10,
            n: 100,
            prior_range: (0.1, 0.3),
            failure_density: 0.3,
            failure_range: (0.1, 0.9),
            leak_range: (0.01, 0.15),
            anchor_false_negative: 0.2,
            anchor_false_positive: 0.05,
            noise_rates: None,
            n_records: 20_000,
            seed: 0,
            cohort_min: 2,
        }
    }
}

fn valid_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!(
            "{name} range ({lo}, {hi}) must lie in [0,1]"
        )));
    }
    Ok(())
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < self.m {
            return Err(Error::Config(format!(
                "scenario needs at least one column per anchor: n = {} < m = {}",
                self.n, self.m
            )));
        }
        if self.m == 0 {
            return Err(Error::Config(
                "scenario needs at least one condition".into(),
            ));
        }
        valid_range("prior", self.prior_range)?;
        valid_range("failure", self.failure_range)?;
        valid_range("leak", self.leak_range)?;
        if !(self.failure_density > 0.0 && self.failure_density <= 1.0) {
            return Err(Error::Config(format!(
                "failure density {} must lie in (0, 1]",
                self.failure_density
            )));
        }
        Ok(())
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        match &self.noise_rates {
            Some(rates) => {
                if rates.len() != self.m {
                    return Err(Error::Config(format!(
                        "{} noise entries for {} conditions",
                        rates.len(),
                        self.m
                    )));
                }
                NoiseModel::new(rates.clone())
            }
            None => NoiseModel::uniform(
                self.m,
                NoiseRates::new(1.0 - self.anchor_false_negative, self.anchor_false_positive),
            ),
        }
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

pub fn condition_name(i: usize) -> String {
    format!("cond_{i:02}")
}

/// Samples a valid network with one anchor column per condition (the last `m`
/// columns).
pub fn generate_ground_truth<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    rng: &mut R,
) -> Result<(ModelParams, NoiseModel)> {
    spec.validate()?;
    let noise = spec.noise_model()?;
    let (m, n) = (spec.m, spec.n);
    let regular = n - m;
    let priors: Vec<f64> = (0..m).map(|_| uniform_in(rng, spec.prior_range)).collect();
    let mut leaks: Vec<f64> = (0..n).map(|_| uniform_in(rng, spec.leak_range)).collect();
    let mut failures = vec![1.0; m * n];
    for i in 0..m {
        for j in 0..regular {
            if rng.gen::<f64>() < spec.failure_density {
                failures[i * n + j] = uniform_in(rng, spec.failure_range);
            }
        }
    }
    let anchor_index: Vec<usize> = (regular..n).collect();
    for (i, &j) in anchor_index.iter().enumerate() {
        leaks[j] = 0.0;
        failures[i * n + j] = 1.0;
    }
    let condition_names: Vec<String> = (0..m).map(condition_name).collect();
    let mut feature_names: Vec<String> = (0..regular).map(|j| format!("obs_{j:03}")).collect();
    feature_names.extend(condition_names.iter().map(|c| format!("anchor:{c}")));
    let params = ModelParams::new(ModelParts {
        priors,
        leaks,
        failures,
        anchor_index,
        condition_names,
        feature_names,
    })?
    .with_anchor_noise(&noise)?;
    Ok((params, noise))
}

/// `n_records` independent draws; record `k` uses its own ChaCha stream so the
/// result does not depend on scheduling.
pub fn generate_dataset(
    params: &ModelParams,
    noise: &NoiseModel,
    n_records: usize,
    seed: u64,
) -> Result<Dataset> {
    let records = (0..n_records)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            params.sample_record(noise, format!("s{seed}-{k}"), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(DatasetMeta::from_model(params), records))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CohortReport {
    pub kept: usize,
    pub total: usize,
    pub retention: f64,
}

/// Keeps records with at least `min_conditions` positive labels. Unlabeled
/// records are dropped unless the threshold is zero.
pub fn cohort_filter(dataset: &Dataset, min_conditions: usize) -> (Dataset, CohortReport) {
    let records: Vec<_> = dataset
        .records
        .iter()
        .filter(|r| min_conditions == 0 || r.n_positive_labels().unwrap_or(0) >= min_conditions)
        .cloned()
        .collect();
    let report = CohortReport {
        kept: records.len(),
        total: dataset.len(),
        retention: if dataset.is_empty() {
            1.0
        } else {
            records.len() as f64 / dataset.len() as f64
        },
    };
    (dataset.with_records(records), report)
}

/// Ground truth plus a train/test pair drawn from it. The test split is
/// cohort-filtered; the train split is not.
pub struct Scenario {
    pub truth: ModelParams,
    pub noise: NoiseModel,
    pub train: Dataset,
    pub test: Dataset,
    pub test_cohort: CohortReport,
}

pub fn build_scenario(spec: &ScenarioSpec, n_test_raw: usize) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (truth, noise) = generate_ground_truth(spec, &mut rng)?;
    let train = generate_dataset(&truth, &noise, spec.n_records, spec.seed.wrapping_add(1))?;
    let test_raw = generate_dataset(&truth, &noise, n_test_raw, spec.seed.wrapping_add(2))?;
    let (test, test_cohort) = cohort_filter(&test_raw, spec.cohort_min);
    Ok(Scenario {
        truth,
        noise,
        train,
        test,
        test_cohort,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioSpec {
        ScenarioSpec {
            m: 4,
            n: 20,
            n_records: 100,
            ..Default::default()
        }
    }

    #[test]
    fn full_density_connects_everything() {
        let spec = ScenarioSpec {
            failure_density: 1.0,
            failure_range: (0.2, 0.8),
            ..small()
        };
        let (p, _) = generate_ground_truth(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..spec.m {
            for j in 0..spec.n - spec.m {
                assert!(p.failure(i, j) < 1.0);
            }
        }
        assert!(p.anchors_single_parent());
    }

    #[test]
    fn same_seed_same_truth() {
        let a = generate_ground_truth(&small(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_ground_truth(&small(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = ScenarioSpec {
            m: 5,
            n: 4,
            ..small()
        };
        assert!(generate_ground_truth(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let spec = ScenarioSpec {
            failure_density: 0.0,
            ..small()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn empty_dataset() {
        let (p, noise) =
            generate_ground_truth(&small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(generate_dataset(&p, &noise, 0, 3).unwrap().is_empty());
    }

    #[test]
    fn cohort_filter_rules() {
        let (p, noise) =
            generate_ground_truth(&small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = generate_dataset(&p, &noise, 500, 4).unwrap();
        let (same, rep) = cohort_filter(&ds, 0);
        assert_eq!(same.records, ds.records);
        assert_eq!(rep.retention, 1.0);
        let (f, rep) = cohort_filter(&ds, 2);
        assert!(f
            .records
            .iter()
            .all(|r| r.n_positive_labels().unwrap() >= 2));
        assert!(rep.kept < rep.total);
        let (ff, _) = cohort_filter(&f, 2);
        assert_eq!(ff.records, f.records);
    }
}
