//! The bipartite noisy-or network: conditions `Y` (latent, independent priors)
//! point at binary observations `X`. Each observation column is switched off
//! only if its leak and every active parent fail:
//!
//! ```text
//! P(X_j = 0 | y) = (1 - l_j) * prod_i f_ij^y_i
//! ```
//!
//! Anchors are ordinary observation columns whose only non-unit failure entry
//! belongs to the condition they anchor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::math::ln_clamped;
use crate::record::PatientRecord;

/// Class-conditional corruption rates of one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRates {
    /// P(A = 1 | Y = 1)
    pub p_a1_y1: f64,
    /// P(A = 1 | Y = 0)
    pub p_a1_y0: f64,
}

impl NoiseRates {
    pub fn new(p_a1_y1: f64, p_a1_y0: f64) -> Self {
        Self { p_a1_y1, p_a1_y0 }
    }

    pub fn noiseless() -> Self {
        Self::new(1.0, 0.0)
    }

    pub fn is_noiseless(&self) -> bool {
        self.p_a1_y1 == 1.0 && self.p_a1_y0 == 0.0
    }

    pub fn p_a1_given(&self, y: bool) -> f64 {
        if y {
            self.p_a1_y1
        } else {
            self.p_a1_y0
        }
    }

    /// The 2x2 corruption block is invertible and oriented the right way.
    pub fn is_identifiable(&self) -> bool {
        self.p_a1_y1 + (1.0 - self.p_a1_y0) > 1.0
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.p_a1_y1) && (0.0..=1.0).contains(&self.p_a1_y0)
    }

    /// Noisy-or failure of the anchor column given its parent is on.
    pub fn anchor_failure(&self) -> f64 {
        let p_a0_y0 = 1.0 - self.p_a1_y0;
        if p_a0_y0 <= 0.0 {
            return 1.0;
        }
        ((1.0 - self.p_a1_y1) / p_a0_y0).min(1.0)
    }

    pub fn anchor_leak(&self) -> f64 {
        self.p_a1_y0
    }

    /// P(Y = 1 | A = a) by Bayes rule under the given prior.
    pub fn posterior_y1(&self, a: bool, prior: f64) -> f64 {
        let (l1, l0) = if a {
            (self.p_a1_y1, self.p_a1_y0)
        } else {
            (1.0 - self.p_a1_y1, 1.0 - self.p_a1_y0)
        };
        let num = prior * l1;
        let den = num + (1.0 - prior) * l0;
        if den <= 0.0 {
            prior
        } else {
            num / den
        }
    }
}

/// Per-condition anchor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoiseModel {
    rates: Vec<NoiseRates>,
}

impl NoiseModel {
    pub fn new(rates: Vec<NoiseRates>) -> Result<Self> {
        for (i, r) in rates.iter().enumerate() {
            if !r.is_valid() {
                return Err(Error::InvalidModel(format!(
                    "noise rates of condition {i} outside [0,1]: {r:?}"
                )));
            }
        }
        let model = Self { rates };
        for i in model.unidentifiable() {
            log::warn!("noise rates of condition {i} are not identifiable");
        }
        Ok(model)
    }

    pub fn noiseless(m: usize) -> Self {
        Self {
            rates: vec![NoiseRates::noiseless(); m],
        }
    }

    pub fn uniform(m: usize, rates: NoiseRates) -> Result<Self> {
        Self::new(vec![rates; m])
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[NoiseRates] {
        &self.rates
    }

    pub fn get(&self, i: usize) -> NoiseRates {
        self.rates[i]
    }

    /// Conditions whose noise block is singular or flipped.
    pub fn unidentifiable(&self) -> Vec<usize> {
        self.rates
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_identifiable())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Owned, unvalidated parameter bundle. Turn it into [`ModelParams`] with
/// [`ModelParams::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParts {
    pub priors: Vec<f64>,
    pub leaks: Vec<f64>,
    /// Row-major `m x n`.
    pub failures: Vec<f64>,
    pub anchor_index: Vec<usize>,
    pub condition_names: Vec<String>,
    pub feature_names: Vec<String>,
}

/// Validated generative parameters. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    parts: ModelParts,
    /// column -> owning condition, for anchor columns
    anchor_owner: Vec<Option<usize>>,
}

fn in_unit(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl ModelParams {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let m = parts.priors.len();
        let n = parts.leaks.len();
        check_len("failures", m * n, parts.failures.len())?;
        check_len("anchor_index", m, parts.anchor_index.len())?;
        check_len("condition_names", m, parts.condition_names.len())?;
        check_len("feature_names", n, parts.feature_names.len())?;
        for (i, &p) in parts.priors.iter().enumerate() {
            if !in_unit(p) {
                return Err(Error::InvalidModel(format!(
                    "prior {i} = {p} outside [0,1]"
                )));
            }
        }
        for (j, &p) in parts.leaks.iter().enumerate() {
            if !in_unit(p) {
                return Err(Error::InvalidModel(format!("leak {j} = {p} outside [0,1]")));
            }
        }
        for (k, &p) in parts.failures.iter().enumerate() {
            if !in_unit(p) {
                return Err(Error::InvalidModel(format!(
                    "failure ({}, {}) = {p} outside [0,1]",
                    k / n.max(1),
                    k % n.max(1)
                )));
            }
        }
        let mut anchor_owner = vec![None; n];
        for (i, &j) in parts.anchor_index.iter().enumerate() {
            check_index("anchor column", j, n)?;
            if let Some(other) = anchor_owner[j] {
                return Err(Error::InvalidModel(format!(
                    "anchor column {j} shared by conditions {other} and {i}"
                )));
            }
            anchor_owner[j] = Some(i);
        }
        for (j, owner) in anchor_owner.iter().enumerate() {
            if let Some(owner) = *owner {
                for i in 0..m {
                    if i != owner && parts.failures[i * n + j] != 1.0 {
                        return Err(Error::InvalidModel(format!(
                            "anchor column {j} of condition {owner} has a second parent {i}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            parts,
            anchor_owner,
        })
    }

    pub fn m(&self) -> usize {
        self.parts.priors.len()
    }

    pub fn n(&self) -> usize {
        self.parts.leaks.len()
    }

    pub fn parts(&self) -> &ModelParts {
        &self.parts
    }

    pub fn into_parts(self) -> ModelParts {
        self.parts
    }

    pub fn priors(&self) -> &[f64] {
        &self.parts.priors
    }

    pub fn leaks(&self) -> &[f64] {
        &self.parts.leaks
    }

    pub fn failures(&self) -> &[f64] {
        &self.parts.failures
    }

    #[inline]
    pub fn failure(&self, i: usize, j: usize) -> f64 {
        self.parts.failures[i * self.n() + j]
    }

    pub fn failure_row(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.parts.failures[i * n..(i + 1) * n]
    }

    pub fn anchor_index(&self) -> &[usize] {
        &self.parts.anchor_index
    }

    pub fn anchor_column(&self, i: usize) -> usize {
        self.parts.anchor_index[i]
    }

    /// The condition anchored by column `j`, if any.
    pub fn anchor_owner(&self, j: usize) -> Option<usize> {
        self.anchor_owner[j]
    }

    pub fn condition_names(&self) -> &[String] {
        &self.parts.condition_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.parts.feature_names
    }

    pub fn condition_by_name(&self, name: &str) -> Option<usize> {
        self.parts.condition_names.iter().position(|c| c == name)
    }

    /// Returns a copy whose anchor columns carry exactly the given noise rates.
    pub fn with_anchor_noise(&self, noise: &NoiseModel) -> Result<Self> {
        check_len("noise model", self.m(), noise.len())?;
        let mut parts = self.parts.clone();
        let n = self.n();
        for (i, &j) in self.parts.anchor_index.iter().enumerate() {
            let r = noise.get(i);
            if r.p_a1_y1 < r.p_a1_y0 {
                return Err(Error::Unidentifiable {
                    condition: self.parts.condition_names[i].clone(),
                    reason: "P(A=1|Y=1) < P(A=1|Y=0)".into(),
                });
            }
            parts.failures[i * n + j] = r.anchor_failure();
            parts.leaks[j] = r.anchor_leak();
        }
        Self::new(parts)
    }

    /// Exact log prior of a condition assignment; `-inf` on conflicts with a
    /// deterministic prior.
    pub fn prior_logprob(&self, y: &[bool]) -> Result<f64> {
        check_len("condition vector", self.m(), y.len())?;
        Ok(y.iter()
            .zip(&self.parts.priors)
            .map(|(&yi, &p)| if yi { p.ln() } else { (1.0 - p).ln() })
            .sum())
    }

    /// P(X_j = 0 | y).
    pub fn cond_prob_x0(&self, j: usize, y: &[bool]) -> Result<f64> {
        check_index("observation", j, self.n())?;
        check_len("condition vector", self.m(), y.len())?;
        Ok(self.prob_x0_unchecked(j, y))
    }

    #[inline]
    pub(crate) fn prob_x0_unchecked(&self, j: usize, y: &[bool]) -> f64 {
        let n = self.n();
        let mut q = 1.0 - self.parts.leaks[j];
        for (i, &yi) in y.iter().enumerate() {
            if yi {
                q *= self.parts.failures[i * n + j];
            }
        }
        q
    }

    /// log P(x, y) with clamped logs.
    pub fn complete_loglik(&self, x: &[bool], y: &[bool]) -> Result<f64> {
        check_len("observation vector", self.n(), x.len())?;
        check_len("condition vector", self.m(), y.len())?;
        Ok(self.complete_loglik_unchecked(x, y))
    }

    pub(crate) fn complete_loglik_unchecked(&self, x: &[bool], y: &[bool]) -> f64 {
        let mut total = self.prior_logprob_clamped(y);
        for (j, &xj) in x.iter().enumerate() {
            total += self.observation_term(j, xj, y);
        }
        total
    }

    pub(crate) fn prior_logprob_clamped(&self, y: &[bool]) -> f64 {
        y.iter()
            .zip(&self.parts.priors)
            .map(|(&yi, &p)| {
                if yi {
                    ln_clamped(p)
                } else {
                    ln_clamped(1.0 - p)
                }
            })
            .sum()
    }

    /// log P(X_j = x_j | y), clamped.
    #[inline]
    pub fn observation_term(&self, j: usize, xj: bool, y: &[bool]) -> f64 {
        let q = self.prob_x0_unchecked(j, y);
        if xj {
            ln_clamped(1.0 - q)
        } else {
            ln_clamped(q)
        }
    }

    /// Marginal P(X_j = 0) under independent priors.
    pub fn quickscore_marginal(&self, j: usize) -> Result<f64> {
        check_index("observation", j, self.n())?;
        let n = self.n();
        let mut q = 1.0 - self.parts.leaks[j];
        for (i, &p) in self.parts.priors.iter().enumerate() {
            q *= 1.0 - p + p * self.parts.failures[i * n + j];
        }
        Ok(q)
    }

    /// Draws one record: conditions from their priors, observations through the
    /// noisy-or, then anchor columns re-drawn through the noise model.
    pub fn sample_record<R: Rng + ?Sized>(
        &self,
        noise: &NoiseModel,
        id: impl Into<String>,
        rng: &mut R,
    ) -> Result<PatientRecord> {
        check_len("noise model", self.m(), noise.len())?;
        let y: Vec<bool> = self
            .parts
            .priors
            .iter()
            .map(|&p| rng.gen::<f64>() < p)
            .collect();
        let mut x = Vec::with_capacity(self.n());
        for j in 0..self.n() {
            let q = self.prob_x0_unchecked(j, &y);
            x.push(rng.gen::<f64>() >= q);
        }
        for (i, &j) in self.parts.anchor_index.iter().enumerate() {
            x[j] = rng.gen::<f64>() < noise.get(i).p_a1_given(y[i]);
        }
        Ok(PatientRecord::new(
            id.into(),
            x,
            &self.parts.anchor_index,
            Some(y),
        ))
    }

    pub fn sample_record_seeded(&self, noise: &NoiseModel, seed: u64) -> Result<PatientRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_record(noise, format!("r{seed}"), &mut rng)
    }

    /// True when every anchor column has exactly one non-unit failure entry.
    pub fn anchors_single_parent(&self) -> bool {
        self.parts
            .anchor_index
            .iter()
            .enumerate()
            .all(|(owner, &j)| (0..self.m()).all(|i| i == owner || self.failure(i, j) == 1.0))
    }
}
