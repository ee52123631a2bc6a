//! Comparison models: fully observed noisy-or MLE (on anchors or on true
//! labels) and per-condition noise-corrected logistic classifiers.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{log1mexp, log_sigmoid, sigmoid, PROB_FLOOR};
use crate::model::{ModelParams, ModelParts, NoiseModel};
use crate::moments::estimate_prior;
use crate::record::{Dataset, PatientRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleConfig {
    pub max_iterations: usize,
    /// stop when the per-record objective improves by less than this
    pub tolerance: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-12,
        }
    }
}

/// Label patterns with their multiplicities and per-column on-counts.
struct PatternTable {
    patterns: Vec<Vec<bool>>,
    counts: Vec<f64>,
    /// on_counts[p][j]
    on_counts: Vec<Vec<f64>>,
}

impl PatternTable {
    fn build(records: &[PatientRecord], labels: &[Vec<bool>], n: usize) -> Self {
        let mut index: HashMap<&[bool], usize> = HashMap::new();
        let mut table = Self {
            patterns: Vec::new(),
            counts: Vec::new(),
            on_counts: Vec::new(),
        };
        for (r, y) in records.iter().zip(labels) {
            let p = *index.entry(y.as_slice()).or_insert_with(|| {
                table.patterns.push(y.clone());
                table.counts.push(0.0);
                table.on_counts.push(vec![0.0; n]);
                table.patterns.len() - 1
            });
            table.counts[p] += 1.0;
            for (j, &xj) in r.x.iter().enumerate() {
                if xj {
                    table.on_counts[p][j] += 1.0;
                }
            }
        }
        table
    }
}

/// Per-column problem in log space: `w[0] = log(1 - l_j)`, `w[1 + k] =
/// log f_{parents[k], j}`. The objective `sum_p k_p log(1 - e^u_p) + (c_p -
/// k_p) u_p` with `u_p` linear in `w` is concave.
struct ColumnProblem {
    parents: Vec<usize>,
    /// (count, on_count, active-parent slots)
    rows: Vec<(f64, f64, Vec<usize>)>,
    total: f64,
}

const W_LO: f64 = -27.631_021_115_928_547; // ln 1e-12
const W_HI: f64 = -1e-12;

impl ColumnProblem {
    fn new(table: &PatternTable, j: usize, parents: Vec<usize>) -> Self {
        let mut merged: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (p, y) in table.patterns.iter().enumerate() {
            let active: Vec<usize> = parents
                .iter()
                .enumerate()
                .filter(|(_, &i)| y[i])
                .map(|(k, _)| k + 1)
                .collect();
            let e = merged.entry(active).or_insert((0.0, 0.0));
            e.0 += table.counts[p];
            e.1 += table.on_counts[p][j];
        }
        let mut rows: Vec<(f64, f64, Vec<usize>)> =
            merged.into_iter().map(|(a, (c, k))| (c, k, a)).collect();
        rows.sort_by(|a, b| a.2.cmp(&b.2));
        let total = rows.iter().map(|r| r.0).sum();
        Self {
            parents,
            rows,
            total,
        }
    }

    fn dim(&self) -> usize {
        self.parents.len() + 1
    }

    fn u(&self, w: &[f64], active: &[usize]) -> f64 {
        w[0] + active.iter().map(|&k| w[k]).sum::<f64>()
    }

    fn objective(&self, w: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|(c, k, a)| {
                let u = self.u(w, a);
                let on = if *k > 0.0 { k * log1mexp(u) } else { 0.0 };
                on + (c - k) * u
            })
            .sum::<f64>()
            / self.total
    }

    fn grad_hess(&self, w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        for (c, k, a) in &self.rows {
            let u = self.u(w, a);
            let e = u.exp();
            let one_minus = -u.exp_m1();
            let d1 = (c - k) - k * e / one_minus;
            let d2 = -k * e / (one_minus * one_minus);
            let mut idx = Vec::with_capacity(a.len() + 1);
            idx.push(0);
            idx.extend_from_slice(a);
            for &r in &idx {
                g[r] += d1;
                for &s in &idx {
                    h[(r, s)] += d2;
                }
            }
        }
        (g / self.total, h / self.total)
    }

    /// Projected Newton ascent on the box `[W_LO, W_HI]^d`.
    fn solve(&self, start: Vec<f64>, cfg: &MleConfig) -> (Vec<f64>, f64) {
        let d = self.dim();
        let mut w: Vec<f64> = start.into_iter().map(|v| v.clamp(W_LO, W_HI)).collect();
        let mut obj = self.objective(&w);
        for _ in 0..cfg.max_iterations {
            let (g, h) = self.grad_hess(&w);
            let bound_tol = 1e-9;
            let free: Vec<usize> = (0..d)
                .filter(|&r| {
                    !((w[r] <= W_LO + bound_tol && g[r] < 0.0)
                        || (w[r] >= W_HI - bound_tol && g[r] > 0.0))
                })
                .collect();
            if free.is_empty() {
                break;
            }
            let nf = free.len();
            let mut neg_h = DMatrix::zeros(nf, nf);
            let mut gf = DVector::zeros(nf);
            for (a, &r) in free.iter().enumerate() {
                gf[a] = g[r];
                for (b, &s) in free.iter().enumerate() {
                    neg_h[(a, b)] = -h[(r, s)];
                }
                neg_h[(a, a)] += 1e-10;
            }
            let dir = match neg_h.clone().cholesky() {
                Some(ch) => ch.solve(&gf),
                None => gf.clone(),
            };
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..60 {
                let mut cand = w.clone();
                for (a, &r) in free.iter().enumerate() {
                    cand[r] = (w[r] + t * dir[a]).clamp(W_LO, W_HI);
                }
                let c_obj = self.objective(&cand);
                if c_obj >= obj {
                    let gain = c_obj - obj;
                    w = cand;
                    obj = c_obj;
                    improved = gain > cfg.tolerance;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        (w, obj)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MleFit {
    pub params: ModelParams,
    /// per-record average of log P(x | y) at the optimum
    pub objective: f64,
    /// conditions whose fitted prior is exactly 0 or 1
    pub degenerate_priors: Vec<usize>,
}

fn initial_w(dim: usize) -> Vec<f64> {
    let mut w = vec![0.5f64.ln(); dim];
    w[0] = 0.9f64.ln();
    w
}

/// Fully observed noisy-or maximum likelihood with `labels[r]` as the
/// conditions of record `r`. Priors are label means; each column's leak and
/// failures are fitted jointly. Anchor columns only take their own condition
/// as a parent.
pub fn fully_observed_mle(
    template: &ModelParams,
    records: &[PatientRecord],
    labels: &[Vec<bool>],
    cfg: &MleConfig,
    starts: Option<&(dyn Fn(usize, usize) -> Vec<f64> + Sync)>,
) -> Result<MleFit> {
    check_len("label rows", records.len(), labels.len())?;
    if records.is_empty() {
        return Err(Error::Data("cannot fit a model to an empty dataset".into()));
    }
    let (m, n) = (template.m(), template.n());
    for (r, y) in records.iter().zip(labels) {
        check_len("record observations", n, r.x.len())?;
        check_len("record labels", m, y.len())?;
    }
    let total = records.len() as f64;
    let priors: Vec<f64> = (0..m)
        .map(|i| labels.iter().filter(|y| y[i]).count() as f64 / total)
        .collect();
    let degenerate_priors: Vec<usize> = (0..m)
        .filter(|&i| priors[i] == 0.0 || priors[i] == 1.0)
        .collect();
    for &i in &degenerate_priors {
        log::warn!(
            "condition '{}' is constant in the training labels; prior fitted as {}",
            template.condition_names()[i],
            priors[i]
        );
    }
    let table = PatternTable::build(records, labels, n);
    let columns: Vec<(Vec<f64>, Vec<usize>, f64)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let parents = match template.anchor_owner(j) {
                Some(owner) => vec![owner],
                None => (0..m).collect(),
            };
            let problem = ColumnProblem::new(&table, j, parents.clone());
            let start = match starts {
                Some(f) => f(j, problem.dim()),
                None => initial_w(problem.dim()),
            };
            let (w, obj) = problem.solve(start, cfg);
            (w, parents, obj)
        })
        .collect();
    let mut leaks = vec![0.0; n];
    let mut failures = vec![1.0; m * n];
    let mut objective = 0.0;
    for (j, (w, parents, obj)) in columns.into_iter().enumerate() {
        leaks[j] = clean(1.0 - w[0].exp());
        for (k, &i) in parents.iter().enumerate() {
            failures[i * n + j] = clean(w[k + 1].exp());
        }
        objective += obj;
    }
    let params = ModelParams::new(ModelParts {
        priors,
        leaks,
        failures,
        ..template.parts().clone()
    })?;
    Ok(MleFit {
        params,
        objective,
        degenerate_priors,
    })
}

/// Snaps values within the optimizer's box margins onto 0 or 1.
fn clean(p: f64) -> f64 {
    if p <= PROB_FLOOR * 1.0001 {
        0.0
    } else if p >= 1.0 - 2e-12 {
        1.0
    } else {
        p
    }
}

/// Anchors taken as labels, then anchor columns overwritten with the true
/// noise rates.
pub fn naive_labels_train(
    dataset: &Dataset,
    template: &ModelParams,
    noise: &NoiseModel,
    cfg: &MleConfig,
) -> Result<MleFit> {
    let labels: Vec<Vec<bool>> = dataset.records.iter().map(|r| r.a.clone()).collect();
    let mut fit = fully_observed_mle(template, &dataset.records, &labels, cfg, None)?;
    fit.params = fit.params.with_anchor_noise(noise)?;
    Ok(fit)
}

/// Fully observed MLE on the true labels; no parameter editing.
pub fn oracle_mle_train(
    dataset: &Dataset,
    template: &ModelParams,
    cfg: &MleConfig,
) -> Result<MleFit> {
    let labels = dataset
        .records
        .iter()
        .map(|r| {
            r.y.clone()
                .ok_or_else(|| Error::Data(format!("record {} has no true labels", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    fully_observed_mle(template, &dataset.records, &labels, cfg, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseTolerantConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// lower clip of each corrected loss term
    pub loss_floor: f64,
}

impl Default for NoiseTolerantConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            loss_floor: -50.0,
        }
    }
}

/// Unbiased noise-corrected log loss for logit `z` and observed anchor `a`;
/// `rho_pos = P(A=0|Y=1)`, `rho_neg = P(A=1|Y=0)`. Returns the loss and its
/// derivative in `z` (zero where the floor is active).
pub fn corrected_log_loss(z: f64, a: bool, rho_pos: f64, rho_neg: f64, floor: f64) -> (f64, f64) {
    let l1 = -log_sigmoid(z);
    let l0 = -log_sigmoid(-z);
    let s = sigmoid(z);
    let (d1, d0) = (s - 1.0, s);
    let den = 1.0 - rho_pos - rho_neg;
    let (loss, grad) = if a {
        (
            (1.0 - rho_neg) * l1 - rho_pos * l0,
            (1.0 - rho_neg) * d1 - rho_pos * d0,
        )
    } else {
        (
            (1.0 - rho_pos) * l0 - rho_neg * l1,
            (1.0 - rho_pos) * d0 - rho_neg * d1,
        )
    };
    let loss = loss / den;
    if loss < floor {
        (floor, 0.0)
    } else {
        (loss, grad / den)
    }
}

/// One logistic model per condition over every column except the
/// condition's own anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTolerantModel {
    /// m x (n + 1); last entry of each row is the bias, own-anchor weight is 0
    pub weights: Vec<Vec<f64>>,
    /// P(Y_i = 1 | A_i = 1), used when the anchor is present
    pub anchor_scores: Vec<f64>,
    pub anchor_index: Vec<usize>,
}

pub fn noise_tolerant_train(
    dataset: &Dataset,
    noise: &NoiseModel,
    cfg: &NoiseTolerantConfig,
) -> Result<NoiseTolerantModel> {
    let meta = &dataset.meta;
    check_len("noise model", meta.m, noise.len())?;
    if dataset.is_empty() {
        return Err(Error::Data(
            "cannot train classifiers on an empty dataset".into(),
        ));
    }
    for i in 0..meta.m {
        let r = noise.get(i);
        if (1.0 - r.p_a1_y1) + r.p_a1_y0 >= 1.0 {
            return Err(Error::Unidentifiable {
                condition: meta.condition_names[i].clone(),
                reason: "noise rates sum to at least 1".into(),
            });
        }
    }
    let n = meta.n;
    let total = dataset.len() as f64;
    let rows: Vec<Vec<usize>> = dataset
        .records
        .iter()
        .map(|r| (0..n).filter(|&j| r.x[j]).collect())
        .collect();
    let weights: Vec<Vec<f64>> = (0..meta.m)
        .into_par_iter()
        .map(|i| {
            let own = meta.anchor_index[i];
            let r = noise.get(i);
            let (rho_pos, rho_neg) = (1.0 - r.p_a1_y1, r.p_a1_y0);
            let mut w = vec![0.0; n + 1];
            for _ in 0..cfg.iterations {
                let mut g = vec![0.0; n + 1];
                for (rec, on) in dataset.records.iter().zip(&rows) {
                    let z = w[n] + on.iter().filter(|&&j| j != own).map(|&j| w[j]).sum::<f64>();
                    let (_, dz) = corrected_log_loss(z, rec.a[i], rho_pos, rho_neg, cfg.loss_floor);
                    for &j in on {
                        g[j] += dz;
                    }
                    g[n] += dz;
                }
                for j in 0..=n {
                    let reg = if j < n { cfg.l2 * w[j] } else { 0.0 };
                    w[j] -= cfg.learning_rate * (g[j] / total + reg);
                }
                w[own] = 0.0;
            }
            w
        })
        .collect();
    let anchor_scores = (0..meta.m)
        .map(|i| {
            let p_a1 = dataset.records.iter().filter(|r| r.a[i]).count() as f64 / total;
            let prior = estimate_prior(noise.get(i), p_a1)?.value;
            Ok(noise.get(i).posterior_y1(true, prior))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseTolerantModel {
        weights,
        anchor_scores,
        anchor_index: meta.anchor_index.clone(),
    })
}

impl NoiseTolerantModel {
    /// Per-condition scores for a record.
    pub fn predict(&self, x: &[bool]) -> Vec<f64> {
        let n = x.len();
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let own = self.anchor_index[i];
                if x[own] {
                    return self.anchor_scores[i];
                }
                let z = w[n]
                    + (0..n)
                        .filter(|&j| x[j] && j != own)
                        .map(|j| w[j])
                        .sum::<f64>();
                sigmoid(z)
            })
            .collect()
    }
}
