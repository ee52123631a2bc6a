//! Test-time inference in the joint model: Gibbs sampling under arbitrary
//! evidence, exact last-tag inference, and held-out anchor scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::math::{clamp_prob, ln_clamped, logit, sigmoid};
use crate::model::{ModelParams, NoiseModel};
use crate::record::PatientRecord;

/// Observed columns and clamped conditions. `None` means unobserved / free.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub observed: Vec<Option<bool>>,
    pub clamped: Vec<Option<bool>>,
}

impl Evidence {
    pub fn empty(model: &ModelParams) -> Self {
        Self {
            observed: vec![None; model.n()],
            clamped: vec![None; model.m()],
        }
    }

    /// Every column of `x` observed.
    pub fn from_x(model: &ModelParams, x: &[bool]) -> Result<Self> {
        check_len("observation vector", model.n(), x.len())?;
        Ok(Self {
            observed: x.iter().map(|&v| Some(v)).collect(),
            clamped: vec![None; model.m()],
        })
    }

    pub fn observe(&mut self, j: usize, value: bool) -> Result<()> {
        check_index("observation", j, self.observed.len())?;
        self.observed[j] = Some(value);
        Ok(())
    }

    pub fn hide(&mut self, j: usize) -> Result<()> {
        check_index("observation", j, self.observed.len())?;
        self.observed[j] = None;
        Ok(())
    }

    /// Fixes condition `i`; clamping it to the opposite value is a conflict.
    pub fn clamp(&mut self, i: usize, value: bool) -> Result<()> {
        check_index("condition", i, self.clamped.len())?;
        if let Some(prev) = self.clamped[i] {
            if prev != value {
                return Err(Error::Data(format!(
                    "condition {i} clamped to both 0 and 1"
                )));
            }
        }
        self.clamped[i] = Some(value);
        Ok(())
    }

    pub fn validate(&self, model: &ModelParams) -> Result<()> {
        check_len("evidence observations", model.n(), self.observed.len())?;
        check_len("evidence clamps", model.m(), self.clamped.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub kept: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            burn_in: 500,
            kept: 2000,
            thin: 1,
            seed: 0,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.kept == 0 || self.thin == 0 {
            return Err(Error::Config(
                "gibbs chains, kept and thin must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GibbsResult {
    /// P(Y_i = 1 | evidence); clamped conditions are exactly 0 or 1
    pub marginals: Vec<f64>,
    pub chains: usize,
    pub sweeps: usize,
    pub kept: usize,
}

fn ln_floor(p: f64) -> f64 {
    p.max(1e-300).ln()
}

/// Rejects evidence that has probability zero under the unclamped model
/// structure, naming the offending observation.
fn check_possible(model: &ModelParams, ev: &Evidence) -> Result<()> {
    let can_be_on = |i: usize| ev.clamped[i] != Some(false) && model.priors()[i] > 0.0;
    let must_be_on = |i: usize| ev.clamped[i] == Some(true) || model.priors()[i] >= 1.0;
    for (i, c) in ev.clamped.iter().enumerate() {
        match c {
            Some(true) if model.priors()[i] == 0.0 => {
                return Err(Error::ImpossibleEvidence(format!(
                    "condition '{}' clamped on with prior 0",
                    model.condition_names()[i]
                )))
            }
            Some(false) if model.priors()[i] == 1.0 => {
                return Err(Error::ImpossibleEvidence(format!(
                    "condition '{}' clamped off with prior 1",
                    model.condition_names()[i]
                )))
            }
            _ => {}
        }
    }
    for (j, obs) in ev.observed.iter().enumerate() {
        let name = &model.feature_names()[j];
        match obs {
            Some(true) => {
                let reachable = model.leaks()[j] > 0.0
                    || (0..model.m()).any(|i| can_be_on(i) && model.failure(i, j) < 1.0);
                if !reachable {
                    return Err(Error::ImpossibleEvidence(format!(
                        "observation '{name}' is on but has no leak and no possible active parent"
                    )));
                }
            }
            Some(false) => {
                if model.leaks()[j] >= 1.0
                    || (0..model.m()).any(|i| must_be_on(i) && model.failure(i, j) == 0.0)
                {
                    return Err(Error::ImpossibleEvidence(format!(
                        "observation '{name}' is off but is forced on"
                    )));
                }
            }
            None => {}
        }
    }
    Ok(())
}

/// Sparse view of the network restricted to observed columns.
struct ObservedGraph {
    /// per condition: (slot, log f) for observed children with f < 1
    children: Vec<Vec<(usize, f64)>>,
    /// per observed slot: value and log(1 - leak)
    values: Vec<bool>,
    base: Vec<f64>,
}

impl ObservedGraph {
    fn new(model: &ModelParams, ev: &Evidence) -> Self {
        let mut slot_of = vec![usize::MAX; model.n()];
        let mut values = Vec::new();
        let mut base = Vec::new();
        for (j, obs) in ev.observed.iter().enumerate() {
            if let Some(v) = obs {
                slot_of[j] = values.len();
                values.push(*v);
                base.push(ln_floor(1.0 - model.leaks()[j]));
            }
        }
        let children = (0..model.m())
            .map(|i| {
                model
                    .failure_row(i)
                    .iter()
                    .enumerate()
                    .filter(|&(j, &f)| slot_of[j] != usize::MAX && f < 1.0)
                    .map(|(j, &f)| (slot_of[j], ln_floor(f)))
                    .collect()
            })
            .collect();
        Self {
            children,
            values,
            base,
        }
    }

    fn log_q(&self, y: &[bool]) -> Vec<f64> {
        let mut s = self.base.clone();
        for (i, kids) in self.children.iter().enumerate() {
            if y[i] {
                for &(k, lf) in kids {
                    s[k] += lf;
                }
            }
        }
        s
    }

    #[inline]
    fn term(xj: bool, log_q: f64) -> f64 {
        let q = log_q.exp();
        if xj {
            ln_clamped(1.0 - q)
        } else {
            ln_clamped(q)
        }
    }

    /// log P(Y_i = 1 | rest) - log P(Y_i = 0 | rest) given the current state.
    fn log_odds(&self, model: &ModelParams, i: usize, yi: bool, s: &[f64]) -> f64 {
        let pi = clamp_prob(model.priors()[i]);
        let mut lo = logit(pi);
        for &(k, lf) in &self.children[i] {
            let without = if yi { s[k] - lf } else { s[k] };
            lo += Self::term(self.values[k], without + lf) - Self::term(self.values[k], without);
        }
        lo
    }
}

fn run_chain(
    model: &ModelParams,
    ev: &Evidence,
    graph: &ObservedGraph,
    cfg: &GibbsConfig,
    chain: usize,
) -> Vec<f64> {
    let m = model.m();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let free: Vec<usize> = (0..m).filter(|&i| ev.clamped[i].is_none()).collect();
    let mut y: Vec<bool> = (0..m)
        .map(|i| ev.clamped[i].unwrap_or_else(|| rng.gen::<f64>() < model.priors()[i]))
        .collect();
    let mut s = graph.log_q(&y);
    let mut sums = vec![0.0; m];
    let total = cfg.burn_in + cfg.kept * cfg.thin;
    for sweep in 0..total {
        let keep = sweep >= cfg.burn_in && (sweep - cfg.burn_in + 1).is_multiple_of(cfg.thin);
        for &i in &free {
            let p = sigmoid(graph.log_odds(model, i, y[i], &s));
            if keep {
                sums[i] += p;
            }
            let new = rng.gen::<f64>() < p;
            if new != y[i] {
                let sign = if new { 1.0 } else { -1.0 };
                for &(k, lf) in &graph.children[i] {
                    s[k] += sign * lf;
                }
                y[i] = new;
            }
        }
    }
    sums
}

/// Systematic-scan Gibbs over the free conditions with Rao-Blackwellized
/// marginals. Chains run in parallel on independent streams of the seed and
/// are merged in chain order, so results do not depend on scheduling.
pub fn gibbs_posterior(
    model: &ModelParams,
    evidence: &Evidence,
    config: &GibbsConfig,
) -> Result<GibbsResult> {
    config.validate()?;
    evidence.validate(model)?;
    check_possible(model, evidence)?;
    let graph = ObservedGraph::new(model, evidence);
    let per_chain: Vec<Vec<f64>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(model, evidence, &graph, config, c))
        .collect();
    let denom = (config.chains * config.kept) as f64;
    let marginals = (0..model.m())
        .map(|i| match evidence.clamped[i] {
            Some(v) => f64::from(u8::from(v)),
            None => per_chain.iter().map(|c| c[i]).sum::<f64>() / denom,
        })
        .collect();
    Ok(GibbsResult {
        marginals,
        chains: config.chains,
        sweeps: config.burn_in + config.kept * config.thin,
        kept: config.kept,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LastTagResult {
    /// candidate conditions in index order
    pub candidates: Vec<usize>,
    pub probabilities: Vec<f64>,
    /// true when every candidate had zero mass and the uniform fallback was used
    pub fallback: bool,
}

impl LastTagResult {
    /// Candidates by descending probability, ties by condition index.
    pub fn ranking(&self) -> Vec<(usize, f64)> {
        let mut r: Vec<(usize, f64)> = self
            .candidates
            .iter()
            .copied()
            .zip(self.probabilities.iter().copied())
            .collect();
        r.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        r
    }
}

/// Exact distribution over which single remaining condition is on, given
/// `x` and the conditions in `known` being on.
pub fn exact_last_tag(model: &ModelParams, x: &[bool], known: &[usize]) -> Result<LastTagResult> {
    check_len("observation vector", model.n(), x.len())?;
    let m = model.m();
    let mut y = vec![false; m];
    for &k in known {
        check_index("known condition", k, m)?;
        y[k] = true;
    }
    let candidates: Vec<usize> = (0..m).filter(|&i| !y[i]).collect();
    if candidates.is_empty() {
        return Err(Error::Data("every condition is already known".into()));
    }
    let logw: Vec<f64> = candidates
        .iter()
        .map(|&i| {
            let mut yy = y.clone();
            yy[i] = true;
            model.complete_loglik_unchecked(x, &yy)
        })
        .collect();
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        let u = 1.0 / candidates.len() as f64;
        return Ok(LastTagResult {
            probabilities: vec![u; candidates.len()],
            candidates,
            fallback: true,
        });
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(LastTagResult {
        probabilities: w.iter().map(|v| v / z).collect(),
        candidates,
        fallback: false,
    })
}

/// P(A_i = 1 | evidence) for every condition in `conditions`, from a single
/// Gibbs run. Each condition's anchor column must be unobserved.
pub fn heldout_anchor_scores(
    model: &ModelParams,
    evidence: &Evidence,
    noise: &NoiseModel,
    conditions: &[usize],
    config: &GibbsConfig,
) -> Result<Vec<f64>> {
    check_len("noise model", model.m(), noise.len())?;
    evidence.validate(model)?;
    for &i in conditions {
        check_index("condition", i, model.m())?;
        if evidence.observed[model.anchor_column(i)].is_some() {
            return Err(Error::Data(format!(
                "anchor of '{}' is part of the evidence",
                model.condition_names()[i]
            )));
        }
    }
    let post = gibbs_posterior(model, evidence, config)?;
    Ok(conditions
        .iter()
        .map(|&i| {
            let r = noise.get(i);
            let p = post.marginals[i];
            p * r.p_a1_y1 + (1.0 - p) * r.p_a1_y0
        })
        .collect())
}

pub fn heldout_anchor_likelihood(
    model: &ModelParams,
    evidence: &Evidence,
    noise: &NoiseModel,
    condition: usize,
    config: &GibbsConfig,
) -> Result<f64> {
    Ok(heldout_anchor_scores(model, evidence, noise, &[condition], config)?[0])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnchorRanking {
    /// censored conditions by descending score, ties by index
    pub ranking: Vec<(usize, f64)>,
    pub target: usize,
    /// 1-based rank of the target
    pub target_rank: usize,
    pub target_score: f64,
}

/// Censors the positive anchor of `target` and every negative anchor, then
/// ranks the censored conditions by held-out anchor likelihood.
pub fn rank_missing_anchor(
    model: &ModelParams,
    record: &PatientRecord,
    noise: &NoiseModel,
    target: usize,
    config: &GibbsConfig,
) -> Result<AnchorRanking> {
    check_len("record anchors", model.m(), record.a.len())?;
    check_index("target condition", target, model.m())?;
    if !record.a.iter().any(|&v| v) {
        return Err(Error::Data(format!(
            "record {} has no positive anchor",
            record.id
        )));
    }
    if !record.a[target] {
        return Err(Error::Data(format!(
            "anchor of '{}' is not positive in record {}",
            model.condition_names()[target],
            record.id
        )));
    }
    let mut ev = Evidence::from_x(model, &record.x)?;
    let censored: Vec<usize> = (0..model.m())
        .filter(|&i| i == target || !record.a[i])
        .collect();
    for &i in &censored {
        ev.hide(model.anchor_column(i))?;
    }
    let scores = heldout_anchor_scores(model, &ev, noise, &censored, config)?;
    let mut ranking: Vec<(usize, f64)> = censored.into_iter().zip(scores).collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let pos = ranking
        .iter()
        .position(|r| r.0 == target)
        .expect("target is censored");
    Ok(AnchorRanking {
        target,
        target_rank: pos + 1,
        target_score: ranking[pos].1,
        ranking,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorScore {
    pub mrr: f64,
    pub accuracy: f64,
    pub mean_log_score: f64,
    pub n_records: usize,
}

/// Held-out anchor task over a validation set: each record with a positive
/// anchor has one positive anchor picked uniformly (seeded per record) and
/// censored along with all negatives.
pub fn heldout_anchor_evaluation(
    model: &ModelParams,
    records: &[PatientRecord],
    noise: &NoiseModel,
    config: &GibbsConfig,
) -> Result<AnchorScore> {
    let results: Vec<AnchorRanking> = records
        .par_iter()
        .enumerate()
        .filter(|(_, r)| r.a.iter().any(|&v| v))
        .map(|(k, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(k as u64);
            let positives: Vec<usize> = (0..r.a.len()).filter(|&i| r.a[i]).collect();
            let target = positives[rng.gen_range(0..positives.len())];
            let cfg = GibbsConfig {
                seed: config.seed.wrapping_add(k as u64 + 1),
                ..*config
            };
            rank_missing_anchor(model, r, noise, target, &cfg)
        })
        .collect::<Result<_>>()?;
    if results.is_empty() {
        return Err(Error::Data(
            "no validation record has a positive anchor".into(),
        ));
    }
    let n = results.len() as f64;
    Ok(AnchorScore {
        mrr: results
            .iter()
            .map(|r| 1.0 / r.target_rank as f64)
            .sum::<f64>()
            / n,
        accuracy: results.iter().filter(|r| r.target_rank == 1).count() as f64 / n,
        mean_log_score: results
            .iter()
            .map(|r| ln_clamped(r.target_score))
            .sum::<f64>()
            / n,
        n_records: results.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelParts, NoiseRates};

    fn single() -> ModelParams {
        ModelParams::new(ModelParts {
            priors: vec![0.2],
            leaks: vec![0.1, 0.0],
            failures: vec![0.3, 1.0],
            anchor_index: vec![1],
            condition_names: vec!["c".into()],
            feature_names: vec!["x".into(), "a".into()],
        })
        .unwrap()
    }

    #[test]
    fn one_child_bayes_by_hand() {
        let model = single();
        let mut ev = Evidence::empty(&model);
        ev.observe(0, true).unwrap();
        // P(x=1|y=1) = 1 - 0.9*0.3 = 0.73, P(x=1|y=0) = 0.1
        let expected = 0.2 * 0.73 / (0.2 * 0.73 + 0.8 * 0.1);
        let cfg = GibbsConfig {
            kept: 20_000,
            ..Default::default()
        };
        let got = gibbs_posterior(&model, &ev, &cfg).unwrap().marginals[0];
        // single free variable: the Rao-Blackwell average is exact
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn clamped_marginals_exact() {
        let model = crate::model::tests::two_by_two();
        let mut ev = Evidence::empty(&model);
        ev.clamp(0, true).unwrap();
        ev.clamp(1, false).unwrap();
        let r = gibbs_posterior(&model, &ev, &GibbsConfig::default()).unwrap();
        assert_eq!(r.marginals, vec![1.0, 0.0]);
        assert!(ev.clamp(0, false).is_err());
    }

    #[test]
    fn impossible_evidence_named() {
        let model = single();
        let mut ev = Evidence::empty(&model);
        ev.clamp(0, false).unwrap();
        ev.observe(1, true).unwrap();
        let err = gibbs_posterior(&model, &ev, &GibbsConfig::default()).unwrap_err();
        assert!(err.to_string().contains("'a'"), "{err}");
    }

    #[test]
    fn same_seed_same_marginals() {
        let model = crate::model::tests::two_by_two();
        let mut ev = Evidence::empty(&model);
        ev.observe(0, true).unwrap();
        let cfg = GibbsConfig {
            seed: 5,
            ..Default::default()
        };
        assert_eq!(
            gibbs_posterior(&model, &ev, &cfg).unwrap(),
            gibbs_posterior(&model, &ev, &cfg).unwrap()
        );
    }

    #[test]
    fn last_tag_forced_and_errors() {
        let model = crate::model::tests::two_by_two();
        let x = vec![true, false, true];
        let r = exact_last_tag(&model, &x, &[0]).unwrap();
        assert_eq!(r.candidates, vec![1]);
        assert_eq!(r.probabilities, vec![1.0]);
        assert!(exact_last_tag(&model, &x, &[0, 1]).is_err());
    }

    #[test]
    fn anchor_in_evidence_rejected() {
        let model = single();
        let noise = NoiseModel::uniform(1, NoiseRates::new(0.8, 0.1)).unwrap();
        let ev = Evidence::from_x(&model, &[true, true]).unwrap();
        assert!(
            heldout_anchor_likelihood(&model, &ev, &noise, 0, &GibbsConfig::default()).is_err()
        );
    }

    #[test]
    fn clamped_off_gives_false_positive_rate() {
        let model = single();
        let noise = NoiseModel::uniform(1, NoiseRates::new(0.8, 0.1)).unwrap();
        let mut ev = Evidence::empty(&model);
        ev.clamp(0, false).unwrap();
        let p = heldout_anchor_likelihood(&model, &ev, &noise, 0, &GibbsConfig::default()).unwrap();
        assert_eq!(p, 0.1);
    }
}
