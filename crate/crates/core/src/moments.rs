//! Method-of-moments initialization from anchors with known noise rates.
//!
//! For every condition `i` and observation `j` we estimate `P(X_j | A_i)` from
//! counts, map it back to `P(X_j | Y_i)` by a KL projection through the anchor
//! corruption process, and read the failure off the ratio
//! `P(X_j=0 | Y_i=1) / P(X_j=0 | Y_i=0)`. Leaks then absorb whatever the
//! Quickscore marginal does not explain.
//!
//! Conditional 4-vectors use the layout
//! `[P(X=0|·=0), P(X=0|·=1), P(X=1|·=0), P(X=1|·=1)]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};
use crate::model::{ModelParams, ModelParts, NoiseModel, NoiseRates};
use crate::record::Dataset;

/// Pseudo-count added to each of the four `(X_j, A_i)` cells.
pub const DEFAULT_SMOOTHING: f64 = 1.0;

pub type Conditional4 = [f64; 4];

/// `R`: two identical 2x2 blocks `[[P(A=0|Y=0), P(A=0|Y=1)], [P(A=1|Y=0), P(A=1|Y=1)]]`.
pub type NoiseMatrix = [[f64; 4]; 4];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionalMoments {
    pub p_x_given_a: Conditional4,
    pub p_x_given_y: Conditional4,
    /// `[n(X=0,A=0), n(X=0,A=1), n(X=1,A=0), n(X=1,A=1)]`
    pub counts: [u64; 4],
}

/// One-pass sufficient statistics for every `(i, j)` pair.
#[derive(Clone, Debug)]
pub struct CooccurrenceCounts {
    pub n_records: u64,
    /// records with anchor `i` on
    pub anchor_on: Vec<u64>,
    /// records with `X_j = 1`
    pub x_on: Vec<u64>,
    /// row-major `m x n`: records with `A_i = 1` and `X_j = 1`
    pub joint_on: Vec<u64>,
}

impl CooccurrenceCounts {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let (m, n) = (dataset.meta.m, dataset.meta.n);
        let mut anchor_on = vec![0u64; m];
        let mut x_on = vec![0u64; n];
        let mut joint_on = vec![0u64; m * n];
        let mut active = Vec::with_capacity(n);
        for r in &dataset.records {
            active.clear();
            active.extend(r.x.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j));
            for &j in &active {
                x_on[j] += 1;
            }
            for (i, &ai) in r.a.iter().enumerate() {
                if ai {
                    anchor_on[i] += 1;
                    let row = &mut joint_on[i * n..(i + 1) * n];
                    for &j in &active {
                        row[j] += 1;
                    }
                }
            }
        }
        Self {
            n_records: dataset.len() as u64,
            anchor_on,
            x_on,
            joint_on,
        }
    }

    pub fn m(&self) -> usize {
        self.anchor_on.len()
    }

    pub fn n(&self) -> usize {
        self.x_on.len()
    }

    /// `[n(X=0,A=0), n(X=0,A=1), n(X=1,A=0), n(X=1,A=1)]`
    pub fn cell_counts(&self, i: usize, j: usize) -> [u64; 4] {
        let n11 = self.joint_on[i * self.n() + j];
        let n_a1 = self.anchor_on[i];
        let n_x1 = self.x_on[j];
        let n10 = n_x1 - n11;
        let n01 = n_a1 - n11;
        let n00 = self.n_records - n_a1 - n10;
        [n00, n01, n10, n11]
    }

    pub fn p_anchor_on(&self, i: usize) -> f64 {
        self.anchor_on[i] as f64 / self.n_records as f64
    }

    pub fn p_x_off(&self, j: usize) -> f64 {
        1.0 - self.x_on[j] as f64 / self.n_records as f64
    }
}

fn conditionals_from_counts(c: [u64; 4], smoothing: f64) -> Conditional4 {
    let [n00, n01, n10, n11] = c.map(|v| v as f64 + smoothing);
    let a0 = n00 + n10;
    let a1 = n01 + n11;
    [n00 / a0, n01 / a1, n10 / a0, n11 / a1]
}

/// Smoothed estimate of `P(X_j | A_i)`. Fails if either anchor state never
/// occurs.
pub fn empirical_conditionals(
    dataset: &Dataset,
    i: usize,
    j: usize,
    smoothing: f64,
) -> Result<ConditionalMoments> {
    check_index("condition", i, dataset.meta.m)?;
    check_index("observation", j, dataset.meta.n)?;
    let mut counts = [0u64; 4];
    for r in &dataset.records {
        let cell = (r.x[j] as usize) * 2 + r.a[i] as usize;
        counts[cell] += 1;
    }
    check_both_anchor_states(&dataset.meta.condition_names[i], counts)?;
    let p = conditionals_from_counts(counts, smoothing);
    Ok(ConditionalMoments {
        p_x_given_a: p,
        p_x_given_y: p,
        counts,
    })
}

fn check_both_anchor_states(condition: &str, c: [u64; 4]) -> Result<()> {
    if c[0] + c[2] == 0 || c[1] + c[3] == 0 {
        return Err(Error::Data(format!(
            "anchor of condition '{condition}' is constant in the data; both anchor states are required"
        )));
    }
    Ok(())
}

pub fn build_noise_matrix(noise: NoiseRates) -> NoiseMatrix {
    let b = [
        [1.0 - noise.p_a1_y0, 1.0 - noise.p_a1_y1],
        [noise.p_a1_y0, noise.p_a1_y1],
    ];
    if (b[0][0] * b[1][1] - b[0][1] * b[1][0]).abs() < 1e-12 {
        log::warn!(
            "singular anchor noise block {noise:?}; denoising falls back to the KL projection"
        );
    }
    let mut r = [[0.0; 4]; 4];
    for blk in 0..2 {
        for a in 0..2 {
            for y in 0..2 {
                r[blk * 2 + a][blk * 2 + y] = b[a][y];
            }
        }
    }
    r
}

/// `W[a][y] = P(Y=y | A=a)`: the rows of `R`'s block reweighted by the prior
/// and renormalized.
pub fn mixing_weights(r: &NoiseMatrix, prior: f64) -> [[f64; 2]; 2] {
    let py = [1.0 - prior, prior];
    let mut w = [[0.0; 2]; 2];
    for a in 0..2 {
        let row = [r[a][0] * py[0], r[a][1] * py[1]];
        let s = row[0] + row[1];
        w[a] = if s > 0.0 {
            [row[0] / s, row[1] / s]
        } else {
            [1.0 - prior, prior]
        };
    }
    w
}

/// Exponentiated-gradient settings for the two-simplex KL projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgConfig {
    pub step: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for EgConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            max_iterations: 5000,
            tolerance: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DenoiseOutcome {
    pub p_x_given_y: Conditional4,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `sum_{x,a} P(x|a) ln(P(x|a) / M(x|a))` with `M(x|a) = sum_y W[a][y] p(x|y)`.
pub fn mixture_kl(target: &Conditional4, w: &[[f64; 2]; 2], p: &Conditional4) -> f64 {
    let mut kl = 0.0;
    for x in 0..2 {
        for a in 0..2 {
            let t = target[x * 2 + a];
            if t > 0.0 {
                let model = w[a][0] * p[x * 2] + w[a][1] * p[x * 2 + 1];
                kl += t * (t / model).ln();
            }
        }
    }
    kl
}

fn kl_gradient(target: &Conditional4, w: &[[f64; 2]; 2], p: &Conditional4) -> Conditional4 {
    let mut g = [0.0; 4];
    for x in 0..2 {
        for a in 0..2 {
            let t = target[x * 2 + a];
            if t > 0.0 {
                let model = w[a][0] * p[x * 2] + w[a][1] * p[x * 2 + 1];
                g[x * 2] -= t * w[a][0] / model;
                g[x * 2 + 1] -= t * w[a][1] / model;
            }
        }
    }
    g
}

/// Multiplicative update of the simplex for `Y = y` only.
fn eg_update(p: &Conditional4, g: &Conditional4, y: usize, step: f64) -> Conditional4 {
    let mut out = *p;
    // subtract the larger exponent for stability
    let e0 = -step * g[y];
    let e1 = -step * g[2 + y];
    let shift = e0.max(e1);
    let u0 = p[y] * (e0 - shift).exp();
    let u1 = p[2 + y] * (e1 - shift).exp();
    let s = u0 + u1;
    out[y] = u0 / s;
    out[2 + y] = u1 / s;
    out
}

fn is_identity(w: &[[f64; 2]; 2]) -> bool {
    w[0] == [1.0, 0.0] && w[1] == [0.0, 1.0]
}

/// KL projection of `P(X_j | A_i)` onto mixtures of candidate `P(X_j | Y_i)`,
/// solved by exponentiated gradient. The two simplices (`Y = 0`, `Y = 1`) are
/// updated in turn, each with its own step size: grown after an accepted step,
/// halved until the objective does not increase. The objective is therefore
/// non-increasing across iterations.
pub fn denoise_conditionals(
    p_x_given_a: &Conditional4,
    r: &NoiseMatrix,
    prior: f64,
    config: &EgConfig,
) -> DenoiseOutcome {
    let w = mixing_weights(r, prior);
    if is_identity(&w) {
        return DenoiseOutcome {
            p_x_given_y: *p_x_given_a,
            objective: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let lo = 1e-3;
    let mut p = [0.0; 4];
    for y in 0..2 {
        let v = p_x_given_a[y].clamp(lo, 1.0 - lo);
        p[y] = v;
        p[2 + y] = 1.0 - v;
    }
    let mut obj = mixture_kl(p_x_given_a, &w, &p);
    let mut steps = [config.step; 2];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let start = obj;
        let mut moved = false;
        for y in 0..2 {
            let g = kl_gradient(p_x_given_a, &w, &p);
            for _ in 0..60 {
                let cand = eg_update(&p, &g, y, steps[y]);
                let cand_obj = mixture_kl(p_x_given_a, &w, &cand);
                if cand_obj <= obj {
                    moved |= cand != p;
                    p = cand;
                    obj = cand_obj;
                    steps[y] *= 1.5;
                    break;
                }
                steps[y] *= 0.5;
            }
        }
        if start - obj <= config.tolerance || !moved || obj <= 0.0 {
            converged = true;
            break;
        }
    }
    DenoiseOutcome {
        p_x_given_y: p,
        objective: obj,
        iterations,
        converged,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub clipped: bool,
    pub degenerate: bool,
}

/// `clip(P(X=0|Y=1) / P(X=0|Y=0), 0, 1)`.
pub fn estimate_failure(p_x_given_y: &Conditional4) -> Estimate {
    let (den, num) = (p_x_given_y[0], p_x_given_y[1]);
    if den <= 0.0 {
        return Estimate {
            value: 1.0,
            clipped: false,
            degenerate: true,
        };
    }
    let raw = num / den;
    let value = raw.clamp(0.0, 1.0);
    Estimate {
        value,
        clipped: value != raw,
        degenerate: false,
    }
}

/// Solves `P(A=1) = pi P(A=1|Y=1) + (1 - pi) P(A=1|Y=0)` for `pi`, clipped.
pub fn estimate_prior(noise: NoiseRates, p_a1: f64) -> Result<Estimate> {
    let gap = noise.p_a1_y1 - noise.p_a1_y0;
    if gap == 0.0 {
        return Err(Error::Unidentifiable {
            condition: String::new(),
            reason: "P(A=1|Y=1) = P(A=1|Y=0)".into(),
        });
    }
    let raw = (p_a1 - noise.p_a1_y0) / gap;
    let value = raw.clamp(0.0, 1.0);
    Ok(Estimate {
        value,
        clipped: value != raw,
        degenerate: false,
    })
}

/// Quickscore inversion `1 - P(X_j=0) / prod_i (1 - pi_i + pi_i f_ij)`, clipped.
pub fn estimate_leak(p_x0: f64, failure_column: &[f64], priors: &[f64]) -> Estimate {
    let den: f64 = failure_column
        .iter()
        .zip(priors)
        .map(|(&f, &p)| 1.0 - p + p * f)
        .product();
    if den <= 0.0 {
        return Estimate {
            value: 0.0,
            clipped: false,
            degenerate: true,
        };
    }
    let raw = 1.0 - p_x0 / den;
    let value = raw.clamp(0.0, 1.0);
    Estimate {
        value,
        clipped: value != raw,
        degenerate: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    pub smoothing: f64,
    /// Skip the KL projection and treat anchors as labels.
    pub denoise: bool,
    pub eg: EgConfig,
    /// non-anchor failures and leaks are kept in [floor, 1 - floor]
    pub probability_floor: f64,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            smoothing: DEFAULT_SMOOTHING,
            denoise: true,
            eg: EgConfig::default(),
            probability_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairDiagnostics {
    pub condition: usize,
    pub observation: usize,
    pub converged: bool,
    pub iterations: usize,
    pub kl: f64,
    pub failure_clipped: bool,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentsReport {
    pub n_records: u64,
    pub priors_clipped: Vec<usize>,
    pub priors_fallback: Vec<usize>,
    pub pairs: Vec<PairDiagnostics>,
    pub failures_clipped: usize,
    pub leaks_clipped: usize,
    pub not_converged: usize,
    pub degenerate_pairs: usize,
}

pub struct MomentsOutcome {
    pub params: ModelParams,
    pub report: MomentsReport,
}

/// Builds the initial parameters. Per-pair problems degrade to flagged
/// defaults instead of aborting.
pub fn moments_init(
    dataset: &Dataset,
    noise: &NoiseModel,
    config: &MomentsConfig,
) -> Result<MomentsOutcome> {
    let meta = &dataset.meta;
    let (m, n) = (meta.m, meta.n);
    if dataset.is_empty() {
        return Err(Error::Data(
            "moments initialization needs a nonempty dataset".into(),
        ));
    }
    if noise.len() != m {
        return Err(Error::Data(format!(
            "noise model has {} entries for {m} conditions",
            noise.len()
        )));
    }
    let counts = CooccurrenceCounts::from_dataset(dataset);
    let mut anchor_owner = vec![None; n];
    for (i, &j) in meta.anchor_index.iter().enumerate() {
        anchor_owner[j] = Some(i);
    }

    let mut priors = vec![0.0; m];
    let mut priors_clipped = Vec::new();
    let mut priors_fallback = Vec::new();
    for i in 0..m {
        let p_a1 = counts.p_anchor_on(i);
        match estimate_prior(noise.get(i), p_a1) {
            Ok(est) => {
                priors[i] = est.value;
                if est.clipped {
                    priors_clipped.push(i);
                }
            }
            Err(_) => {
                log::warn!(
                    "condition '{}': unidentifiable prior, using P(A=1)",
                    meta.condition_names[i]
                );
                priors[i] = p_a1;
                priors_fallback.push(i);
            }
        }
    }

    let rows: Vec<(Vec<f64>, Vec<PairDiagnostics>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let r = build_noise_matrix(noise.get(i));
            let mut row = vec![1.0; n];
            let mut diags = Vec::new();
            for j in 0..n {
                if anchor_owner[j].is_some() {
                    continue;
                }
                let cells = counts.cell_counts(i, j);
                if check_both_anchor_states(&meta.condition_names[i], cells).is_err() {
                    diags.push(PairDiagnostics {
                        condition: i,
                        observation: j,
                        converged: false,
                        iterations: 0,
                        kl: f64::NAN,
                        failure_clipped: false,
                        degenerate: true,
                    });
                    continue;
                }
                let p_xa = conditionals_from_counts(cells, config.smoothing);
                let outcome = if config.denoise {
                    denoise_conditionals(&p_xa, &r, priors[i], &config.eg)
                } else {
                    DenoiseOutcome {
                        p_x_given_y: p_xa,
                        objective: 0.0,
                        iterations: 0,
                        converged: true,
                    }
                };
                let f = estimate_failure(&outcome.p_x_given_y);
                row[j] = f.value;
                diags.push(PairDiagnostics {
                    condition: i,
                    observation: j,
                    converged: outcome.converged,
                    iterations: outcome.iterations,
                    kl: outcome.objective,
                    failure_clipped: f.clipped,
                    degenerate: f.degenerate,
                });
            }
            (row, diags)
        })
        .collect();

    let mut failures = vec![1.0; m * n];
    let mut pairs = Vec::with_capacity(m * n);
    for (i, (row, diags)) in rows.into_iter().enumerate() {
        failures[i * n..(i + 1) * n].copy_from_slice(&row);
        pairs.extend(diags);
    }

    let mut leaks = vec![0.0; n];
    let mut leaks_clipped = 0;
    let mut column = vec![0.0; m];
    for j in 0..n {
        if anchor_owner[j].is_some() {
            continue;
        }
        for i in 0..m {
            column[i] = failures[i * n + j];
        }
        let est = estimate_leak(counts.p_x_off(j), &column, &priors);
        leaks[j] = est.value;
        leaks_clipped += est.clipped as usize;
    }

    let floor = config.probability_floor;
    if !(0.0..0.5).contains(&floor) {
        return Err(Error::Config(format!(
            "probability floor must lie in [0, 0.5), got {floor}"
        )));
    }
    for j in (0..n).filter(|&j| anchor_owner[j].is_none()) {
        leaks[j] = leaks[j].clamp(floor, 1.0 - floor);
        for i in 0..m {
            failures[i * n + j] = failures[i * n + j].clamp(floor, 1.0 - floor);
        }
    }

    let params = ModelParams::new(ModelParts {
        priors,
        leaks,
        failures,
        anchor_index: meta.anchor_index.clone(),
        condition_names: meta.condition_names.clone(),
        feature_names: meta.feature_names.clone(),
    })?
    .with_anchor_noise(noise)?;

    let report = MomentsReport {
        n_records: counts.n_records,
        priors_clipped,
        priors_fallback,
        failures_clipped: pairs.iter().filter(|p| p.failure_clipped).count(),
        leaks_clipped,
        not_converged: pairs.iter().filter(|p| !p.converged).count(),
        degenerate_pairs: pairs.iter().filter(|p| p.degenerate).count(),
        pairs,
    };
    Ok(MomentsOutcome { params, report })
}
