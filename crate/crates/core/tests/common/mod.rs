//! Independent oracles shared by the integration tests. Everything here is
//! brute force: enumeration over assignments, grids, closed-form inverses.
#![allow(dead_code)]

use clintag_core::{ModelParams, ModelParts};
use rand::Rng;

/// Random valid network with `m` conditions and `n` columns, the last `m` of
/// which are anchors. Probabilities stay away from 0 and 1.
pub fn random_model<R: Rng>(rng: &mut R, m: usize, n: usize) -> ModelParams {
    assert!(n >= m);
    let regular = n - m;
    let priors: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..0.6)).collect();
    let leaks: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.3)).collect();
    let mut failures = vec![1.0; m * n];
    for i in 0..m {
        for j in 0..regular {
            if rng.gen::<f64>() < 0.7 {
                failures[i * n + j] = rng.gen_range(0.05..0.95);
            }
        }
        failures[i * n + regular + i] = rng.gen_range(0.05..0.5);
    }
    ModelParams::new(ModelParts {
        priors,
        leaks,
        failures,
        anchor_index: (regular..n).collect(),
        condition_names: (0..m).map(|i| format!("c{i}")).collect(),
        feature_names: (0..n).map(|j| format!("x{j}")).collect(),
    })
    .unwrap()
}

pub fn bits(mask: usize, len: usize) -> Vec<bool> {
    (0..len).map(|k| mask >> k & 1 == 1).collect()
}

/// Direct product form of the joint, no logs.
pub fn joint_prob(model: &ModelParams, x: &[bool], y: &[bool]) -> f64 {
    let mut p = 1.0;
    for i in 0..model.m() {
        p *= if y[i] {
            model.priors()[i]
        } else {
            1.0 - model.priors()[i]
        };
    }
    for j in 0..model.n() {
        let mut q = 1.0 - model.leaks()[j];
        for i in 0..model.m() {
            if y[i] {
                q *= model.failure(i, j);
            }
        }
        p *= if x[j] { 1.0 - q } else { q };
    }
    p
}

/// P(X_j = 0) by summing over every condition assignment.
pub fn brute_marginal_x0(model: &ModelParams, j: usize) -> f64 {
    let m = model.m();
    let mut total = 0.0;
    for mask in 0..1usize << m {
        let y = bits(mask, m);
        let mut py = 1.0;
        for i in 0..m {
            py *= if y[i] {
                model.priors()[i]
            } else {
                1.0 - model.priors()[i]
            };
        }
        let mut q = 1.0 - model.leaks()[j];
        for i in 0..m {
            if y[i] {
                q *= model.failure(i, j);
            }
        }
        total += py * q;
    }
    total
}

/// Posterior marginals P(Y_i = 1 | evidence) by enumeration. `observed[j]` is
/// `None` for unobserved columns; `clamped[i]` fixes a condition.
pub fn brute_posterior(
    model: &ModelParams,
    observed: &[Option<bool>],
    clamped: &[Option<bool>],
) -> Vec<f64> {
    let m = model.m();
    let mut weights = vec![0.0; m];
    let mut z = 0.0;
    for mask in 0..1usize << m {
        let y = bits(mask, m);
        if clamped
            .iter()
            .zip(&y)
            .any(|(c, &v)| matches!(c, Some(cv) if *cv != v))
        {
            continue;
        }
        let mut p = 1.0;
        for i in 0..m {
            p *= if y[i] {
                model.priors()[i]
            } else {
                1.0 - model.priors()[i]
            };
        }
        for (j, obs) in observed.iter().enumerate() {
            if let Some(xj) = obs {
                let mut q = 1.0 - model.leaks()[j];
                for i in 0..m {
                    if y[i] {
                        q *= model.failure(i, j);
                    }
                }
                p *= if *xj { 1.0 - q } else { q };
            }
        }
        z += p;
        for i in 0..m {
            if y[i] {
                weights[i] += p;
            }
        }
    }
    weights.iter().map(|w| w / z).collect()
}

/// log P(x) by enumeration.
pub fn brute_log_px(model: &ModelParams, x: &[bool]) -> f64 {
    let m = model.m();
    (0..1usize << m)
        .map(|mask| joint_prob(model, x, &bits(mask, m)))
        .sum::<f64>()
        .ln()
}

/// Closed-form `P(X|Y)` from `P(X|A)` by solving `R diag(pi) u = P(A) * P(X|A)`
/// for each value of X. Returns `None` if the 2x2 system is singular.
pub fn invert_noise(
    p_x_given_a: &[f64; 4],
    p_a1_y1: f64,
    p_a1_y0: f64,
    prior: f64,
) -> Option<[f64; 4]> {
    // B[a][y] * pi_y
    let b = [
        [(1.0 - p_a1_y0) * (1.0 - prior), (1.0 - p_a1_y1) * prior],
        [p_a1_y0 * (1.0 - prior), p_a1_y1 * prior],
    ];
    let p_a = [b[0][0] + b[0][1], b[1][0] + b[1][1]];
    let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
    if det.abs() < 1e-14 {
        return None;
    }
    let mut out = [0.0; 4];
    for x in 0..2 {
        let rhs = [p_a[0] * p_x_given_a[x * 2], p_a[1] * p_x_given_a[x * 2 + 1]];
        let u0 = (rhs[0] * b[1][1] - b[0][1] * rhs[1]) / det;
        let u1 = (b[0][0] * rhs[1] - b[1][0] * rhs[0]) / det;
        out[x * 2] = u0;
        out[x * 2 + 1] = u1;
    }
    Some(out)
}

/// The KL objective evaluated from scratch: mixture weights by Bayes rule.
pub fn kl_by_bayes(target: &[f64; 4], p_a1_y1: f64, p_a1_y0: f64, prior: f64, p: &[f64; 4]) -> f64 {
    let mut total = 0.0;
    for a in 0..2 {
        let like = |y: usize| -> f64 {
            let pa1 = if y == 1 { p_a1_y1 } else { p_a1_y0 };
            if a == 1 {
                pa1
            } else {
                1.0 - pa1
            }
        };
        let j0 = like(0) * (1.0 - prior);
        let j1 = like(1) * prior;
        let (w0, w1) = (j0 / (j0 + j1), j1 / (j0 + j1));
        for x in 0..2 {
            let t = target[x * 2 + a];
            if t > 0.0 {
                let mx = w0 * p[x * 2] + w1 * p[x * 2 + 1];
                total += t * (t / mx).ln();
            }
        }
    }
    total
}

/// Smallest KL over the grid `P(X=0|Y=0), P(X=0|Y=1) in {0, h, 2h, ..., 1}`.
pub fn grid_min_kl(target: &[f64; 4], p_a1_y1: f64, p_a1_y0: f64, prior: f64, h: f64) -> f64 {
    let steps = (1.0 / h).round() as usize;
    let mut best = f64::INFINITY;
    for s0 in 0..=steps {
        let u = s0 as f64 / steps as f64;
        for s1 in 0..=steps {
            let v = s1 as f64 / steps as f64;
            let kl = kl_by_bayes(target, p_a1_y1, p_a1_y0, prior, &[u, v, 1.0 - u, 1.0 - v]);
            if kl < best {
                best = kl;
            }
        }
    }
    best
}
