//! Semi-supervised variational training: a logistic recognition model,
//! score-function gradients with signal centering, normalization and an
//! input-dependent baseline, and pathwise gradients for the network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::inference::{heldout_anchor_evaluation, AnchorScore, GibbsConfig};
use crate::math::{clamp_prob, log_sigmoid, logit, sigmoid};
use crate::model::{ModelParams, ModelParts, NoiseModel};
use crate::model_file::{sha256_hex, ModelDocument};
use crate::moments::estimate_prior;
use crate::record::{Dataset, PatientRecord};

/// Logistic recognition model: row `i` of `weights` has `n` feature weights
/// followed by a bias; `aux_bias` is the extra anchor-prediction bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionParams {
    pub m: usize,
    pub n: usize,
    pub weights: Vec<f64>,
    pub aux_bias: Vec<f64>,
}

impl RecognitionParams {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            weights: vec![0.0; m * (n + 1)],
            aux_bias: vec![0.0; m],
        }
    }

    /// Weights uniform in [-0.1, 0.1], auxiliary biases 0.
    pub fn random<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Self {
        Self {
            m,
            n,
            weights: (0..m * (n + 1))
                .map(|_| rng.gen_range(-0.1..=0.1))
                .collect(),
            aux_bias: vec![0.0; m],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n + 1;
        &self.weights[i * w..(i + 1) * w]
    }

    fn logits(&self, input: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| self.row(i).iter().zip(input).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Per-feature means of the training split; maps `x` to the centered,
/// 1-padded input of the recognition model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputCentering {
    pub means: Vec<f64>,
}

impl InputCentering {
    pub fn from_records(records: &[PatientRecord], n: usize) -> Self {
        let mut means = vec![0.0; n];
        for r in records {
            for (j, &v) in r.x.iter().enumerate() {
                if v {
                    means[j] += 1.0;
                }
            }
        }
        let total = records.len().max(1) as f64;
        means.iter_mut().for_each(|v| *v /= total);
        Self { means }
    }

    pub fn none(n: usize) -> Self {
        Self {
            means: vec![0.0; n],
        }
    }

    pub fn centered(&self, x: &[bool]) -> Vec<f64> {
        let mut out: Vec<f64> = x
            .iter()
            .zip(&self.means)
            .map(|(&v, mu)| f64::from(u8::from(v)) - mu)
            .collect();
        out.push(1.0);
        out
    }
}

/// Copy of the centered input with every anchor column set to 0.
pub fn censor_anchors(centered: &[f64], anchor_index: &[usize]) -> Vec<f64> {
    let mut out = centered.to_vec();
    for &j in anchor_index {
        out[j] = 0.0;
    }
    out
}

/// `sigma(phi_i . xbar)` per condition.
pub fn recognition_posterior(phi: &RecognitionParams, xbar: &[f64]) -> Result<Vec<f64>> {
    check_len("centered input", phi.n + 1, xbar.len())?;
    Ok(phi.logits(xbar).into_iter().map(sigmoid).collect())
}

fn log_q(logits: &[f64], y: &[bool]) -> f64 {
    logits
        .iter()
        .zip(y)
        .map(|(&z, &yi)| if yi { log_sigmoid(z) } else { log_sigmoid(-z) })
        .sum()
}

fn sample_q<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Vec<bool> {
    probs.iter().map(|&p| rng.gen::<f64>() < p).collect()
}

/// Monte Carlo ELBO with `samples` draws from q.
pub fn elbo_estimate<R: Rng + ?Sized>(
    theta: &ModelParams,
    phi: &RecognitionParams,
    x: &[bool],
    xbar: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check_len("observation vector", theta.n(), x.len())?;
    check_len("centered input", phi.n + 1, xbar.len())?;
    if samples == 0 {
        return Err(Error::Config("at least one sample is needed".into()));
    }
    let z = phi.logits(xbar);
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let mut total = 0.0;
    for _ in 0..samples {
        let y = sample_q(&p, rng);
        total += theta.complete_loglik_unchecked(x, &y) - log_q(&z, &y);
    }
    Ok(total / samples as f64)
}

/// Negative log loss of predicting the anchors from the censored input.
pub fn supervised_term(phi: &RecognitionParams, xtilde: &[f64], a: &[bool]) -> Result<f64> {
    check_len("censored input", phi.n + 1, xtilde.len())?;
    check_len("anchor vector", phi.m, a.len())?;
    let z = phi.logits(xtilde);
    Ok(-z
        .iter()
        .zip(&phi.aux_bias)
        .zip(a)
        .map(|((&zi, &b), &ai)| {
            if ai {
                log_sigmoid(zi + b)
            } else {
                log_sigmoid(-(zi + b))
            }
        })
        .sum::<f64>())
}

/// One score-function sample of the ELBO gradient in `phi.weights`, with a
/// constant `baseline` subtracted from the learning signal. Returns the
/// learning signal and the gradient.
pub fn score_function_sample<R: Rng + ?Sized>(
    theta: &ModelParams,
    phi: &RecognitionParams,
    x: &[bool],
    xbar: &[f64],
    baseline: f64,
    rng: &mut R,
) -> (f64, Vec<f64>) {
    let z = phi.logits(xbar);
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let y = sample_q(&p, rng);
    let signal = theta.complete_loglik_unchecked(x, &y) - log_q(&z, &y);
    let w = phi.n + 1;
    let mut g = vec![0.0; phi.m * w];
    for i in 0..phi.m {
        let c = (signal - baseline) * (f64::from(u8::from(y[i])) - p[i]);
        for (k, &v) in xbar.iter().enumerate() {
            g[i * w + k] = c * v;
        }
    }
    (signal, g)
}

/// Unconstrained coordinates of the trainable part of a network: failure
/// and leak logits of every non-anchor column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaLogits {
    /// m x n row-major; anchor columns unused
    pub failure: Vec<f64>,
    pub leak: Vec<f64>,
}

/// Probabilities are kept this far from 0 and 1 so their logits are finite.
pub const LOGIT_MARGIN: f64 = 1e-6;

impl ThetaLogits {
    pub fn from_model(model: &ModelParams) -> Self {
        let clip = |p: f64| logit(p.clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN));
        Self {
            failure: model.failures().iter().map(|&f| clip(f)).collect(),
            leak: model.leaks().iter().map(|&l| clip(l)).collect(),
        }
    }

    /// `template` with its non-anchor failures and leaks replaced.
    pub fn to_model(&self, template: &ModelParams) -> Result<ModelParams> {
        let (m, n) = (template.m(), template.n());
        let mut parts: ModelParts = template.parts().clone();
        for j in 0..n {
            if template.anchor_owner(j).is_some() {
                continue;
            }
            parts.leaks[j] = sigmoid(self.leak[j]);
            for i in 0..m {
                parts.failures[i * n + j] = sigmoid(self.failure[i * n + j]);
            }
        }
        ModelParams::new(parts)
    }
}

/// Gradient of `log P(x, y)` in the failure and leak logits of non-anchor
/// columns, accumulated into `gf` (m x n) and `gl` (n) with weight `scale`.
pub fn theta_gradient(
    model: &ModelParams,
    x: &[bool],
    y: &[bool],
    scale: f64,
    gf: &mut [f64],
    gl: &mut [f64],
) {
    let (m, n) = (model.m(), model.n());
    for j in 0..n {
        if model.anchor_owner(j).is_some() {
            continue;
        }
        let q = model.prob_x0_unchecked(j, y);
        let coef = if x[j] {
            let qc = clamp_prob(q);
            -qc / (1.0 - qc)
        } else {
            1.0
        } * scale;
        gl[j] -= coef * model.leaks()[j];
        for i in 0..m {
            if y[i] {
                gf[i * n + j] += coef * (1.0 - model.failure(i, j));
            }
        }
    }
}

/// Two-layer tanh regression network predicting the learning signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineNet {
    pub input: usize,
    pub hidden: usize,
    /// hidden x input, then hidden biases, then hidden output weights, then the output bias
    pub params: Vec<f64>,
}

impl BaselineNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input as f64).sqrt();
        let mut params = vec![0.0; hidden * input + 2 * hidden + 1];
        for v in params[..hidden * input].iter_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
        Self {
            input,
            hidden,
            params,
        }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (h, d) = (self.hidden, self.input);
        let (w1, rest) = self.params.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h);
        (w1, b1, w2, rest[0])
    }

    fn hidden_activations(&self, input: &[f64]) -> Vec<f64> {
        let (w1, b1, _, _) = self.split();
        let d = self.input;
        (0..self.hidden)
            .map(|k| {
                (b1[k]
                    + w1[k * d..(k + 1) * d]
                        .iter()
                        .zip(input)
                        .map(|(a, b)| a * b)
                        .sum::<f64>())
                .tanh()
            })
            .collect()
    }

    pub fn forward(&self, input: &[f64]) -> f64 {
        let (_, _, w2, b2) = self.split();
        b2 + self
            .hidden_activations(input)
            .iter()
            .zip(w2)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }

    /// Adds `scale * d output / d params` into `grad`.
    fn backward(&self, input: &[f64], scale: f64, grad: &mut [f64]) {
        let (h, d) = (self.hidden, self.input);
        let act = self.hidden_activations(input);
        let (_, _, w2, _) = self.split();
        for k in 0..h {
            let dpre = scale * w2[k] * (1.0 - act[k] * act[k]);
            let row = &mut grad[k * d..(k + 1) * d];
            for (g, &v) in row.iter_mut().zip(input) {
                *g += dpre * v;
            }
            grad[h * d + k] += dpre;
            grad[h * d + h + k] += scale * act[k];
        }
        grad[h * d + 2 * h] += scale;
    }
}

/// RMSprop ascent: `p += lr * g / (sqrt(avg g^2) + eps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub decay: f64,
    pub eps: f64,
    pub cache: Vec<f64>,
}

impl RmsProp {
    pub fn new(len: usize, decay: f64) -> Self {
        Self {
            decay,
            eps: 1e-8,
            cache: vec![0.0; len],
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, &g), c) in params.iter_mut().zip(grad).zip(self.cache.iter_mut()) {
            *c = self.decay * *c + (1.0 - self.decay) * g * g;
            *p += lr * g / (c.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// weight of the anchor-prediction term
    pub lambda: f64,
    pub samples_per_gradient: usize,
    pub lr_phi: f64,
    pub lr_theta_ratio: f64,
    /// epochs with the network frozen, counted before `epochs`
    pub burn_in_epochs: usize,
    /// epochs with the network trained
    pub epochs: usize,
    pub minibatch: usize,
    pub weight_decay: f64,
    pub baseline_hidden: usize,
    pub signal_decay: f64,
    pub rmsprop_decay: f64,
    pub validation_size: usize,
    /// sampler budget for held-out anchor scoring of checkpoints
    pub selection_gibbs: GibbsConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            samples_per_gradient: 10,
            lr_phi: 1e-4,
            lr_theta_ratio: 0.2,
            burn_in_epochs: 50,
            epochs: 50,
            minibatch: 64,
            weight_decay: 0.0,
            baseline_hidden: 100,
            signal_decay: 0.9,
            rmsprop_decay: 0.99,
            validation_size: 1000,
            selection_gibbs: GibbsConfig {
                chains: 1,
                burn_in: 50,
                kept: 200,
                thin: 1,
                seed: 0,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.samples_per_gradient == 0 || self.minibatch == 0 || self.baseline_hidden == 0 {
            return Err(Error::Config(
                "samples, minibatch and baseline width must be positive".into(),
            ));
        }
        if self.lr_phi <= 0.0 || self.lr_theta_ratio < 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.signal_decay) || !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Config("decay rates must lie in [0, 1)".into()));
        }
        self.selection_gibbs.validate()
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub template: ModelParams,
    pub theta: ThetaLogits,
    pub model: ModelParams,
    pub phi: RecognitionParams,
    pub baseline: BaselineNet,
    pub centering: InputCentering,
    pub signal_mean: f64,
    pub signal_var: f64,
    pub steps: u64,
    pub skipped_steps: u64,
    opt_phi: RmsProp,
    opt_aux: RmsProp,
    opt_failure: RmsProp,
    opt_leak: RmsProp,
    opt_baseline: RmsProp,
}

impl TrainState {
    pub fn new(
        theta0: &ModelParams,
        centering: InputCentering,
        config: &TrainConfig,
    ) -> Result<Self> {
        let (m, n) = (theta0.m(), theta0.n());
        check_len("centering means", n, centering.means.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let phi = RecognitionParams::random(m, n, &mut rng);
        let baseline = BaselineNet::new(n + 1, config.baseline_hidden, &mut rng);
        let theta = ThetaLogits::from_model(theta0);
        let model = theta.to_model(theta0)?;
        let d = config.rmsprop_decay;
        Ok(Self {
            opt_phi: RmsProp::new(phi.weights.len(), d),
            opt_aux: RmsProp::new(m, d),
            opt_failure: RmsProp::new(m * n, d),
            opt_leak: RmsProp::new(n, d),
            opt_baseline: RmsProp::new(baseline.params.len(), d),
            template: theta0.clone(),
            theta,
            model,
            phi,
            baseline,
            centering,
            signal_mean: 0.0,
            signal_var: 1.0,
            steps: 0,
            skipped_steps: 0,
        })
    }
}

struct RecordGrad {
    phi: Vec<f64>,
    aux: Vec<f64>,
    failure: Vec<f64>,
    leak: Vec<f64>,
    baseline: Vec<f64>,
    /// learning signals minus the input-dependent baseline
    residuals: Vec<f64>,
    elbo: f64,
    supervised: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub elbo: f64,
    pub supervised_loss: f64,
    pub skipped: bool,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn record_gradient(
    state: &TrainState,
    record: &PatientRecord,
    config: &TrainConfig,
    train_theta: bool,
    rng: &mut ChaCha8Rng,
) -> RecordGrad {
    let model = &state.model;
    let (m, n) = (model.m(), model.n());
    let w = n + 1;
    let xbar = state.centering.centered(&record.x);
    let z = state.phi.logits(&xbar);
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let b = state.baseline.forward(&xbar);
    let scale = 1.0 / state.signal_var.sqrt().max(1.0);
    let s_count = config.samples_per_gradient as f64;
    let mut g = RecordGrad {
        phi: vec![0.0; m * w],
        aux: vec![0.0; m],
        failure: if train_theta {
            vec![0.0; m * n]
        } else {
            Vec::new()
        },
        leak: if train_theta {
            vec![0.0; n]
        } else {
            Vec::new()
        },
        baseline: vec![0.0; state.baseline.params.len()],
        residuals: Vec::with_capacity(config.samples_per_gradient),
        elbo: 0.0,
        supervised: 0.0,
    };
    let mut coef = vec![0.0; m];
    for _ in 0..config.samples_per_gradient {
        let y = sample_q(&p, rng);
        let signal = model.complete_loglik_unchecked(&record.x, &y) - log_q(&z, &y);
        g.elbo += signal / s_count;
        let residual = signal - b;
        g.residuals.push(residual);
        let centered = (residual - state.signal_mean) * scale;
        for i in 0..m {
            coef[i] += centered * (f64::from(u8::from(y[i])) - p[i]) / s_count;
        }
        if train_theta {
            theta_gradient(
                model,
                &record.x,
                &y,
                1.0 / s_count,
                &mut g.failure,
                &mut g.leak,
            );
        }
    }
    let xtilde = censor_anchors(&xbar, model.anchor_index());
    let zt = state.phi.logits(&xtilde);
    for i in 0..m {
        let zi = zt[i] + state.phi.aux_bias[i];
        let ai = record.a[i];
        g.supervised -= if ai {
            log_sigmoid(zi)
        } else {
            log_sigmoid(-zi)
        };
        let err = config.lambda * (f64::from(u8::from(ai)) - sigmoid(zi));
        g.aux[i] = err;
        for k in 0..w {
            g.phi[i * w + k] = coef[i] * xbar[k] + err * xtilde[k];
        }
    }
    let mean_centered = g
        .residuals
        .iter()
        .map(|r| r - state.signal_mean)
        .sum::<f64>()
        / s_count;
    state
        .baseline
        .backward(&xbar, mean_centered, &mut g.baseline);
    g
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One minibatch update. Per-record randomness comes from `stream_seed`
/// and the record's position, and per-record gradients are summed in
/// batch order, so the result does not depend on the thread count.
pub fn nvil_step(
    state: &mut TrainState,
    batch: &[&PatientRecord],
    config: &TrainConfig,
    train_theta: bool,
    stream_seed: u64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Ok(StepStats::default());
    }
    let grads: Vec<RecordGrad> = batch
        .par_iter()
        .enumerate()
        .map(|(k, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
            rng.set_stream(k as u64);
            record_gradient(state, r, config, train_theta, &mut rng)
        })
        .collect();
    let nb = batch.len() as f64;
    let (m, n) = (state.model.m(), state.model.n());
    let mut phi = vec![0.0; state.phi.weights.len()];
    let mut aux = vec![0.0; m];
    let mut failure = vec![0.0; if train_theta { m * n } else { 0 }];
    let mut leak = vec![0.0; if train_theta { n } else { 0 }];
    let mut base = vec![0.0; state.baseline.params.len()];
    let mut residuals = Vec::new();
    let mut stats = StepStats::default();
    let add =
        |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s / nb);
    for g in &grads {
        add(&mut phi, &g.phi);
        add(&mut aux, &g.aux);
        add(&mut failure, &g.failure);
        add(&mut leak, &g.leak);
        add(&mut base, &g.baseline);
        residuals.extend_from_slice(&g.residuals);
        stats.elbo += g.elbo / nb;
        stats.supervised_loss += g.supervised / nb;
    }
    let w = n + 1;
    if config.weight_decay > 0.0 {
        for i in 0..m {
            for k in 0..n {
                phi[i * w + k] -= config.weight_decay * state.phi.weights[i * w + k];
            }
        }
    }
    if ![&phi, &aux, &failure, &leak, &base]
        .iter()
        .all(|v| all_finite(v))
        || !all_finite(&residuals)
    {
        log::warn!(
            "non-finite gradient at step {}; update skipped",
            state.steps
        );
        state.skipped_steps += 1;
        state.steps += 1;
        stats.skipped = true;
        return Ok(stats);
    }
    state
        .opt_phi
        .ascend(&mut state.phi.weights, &phi, config.lr_phi);
    state
        .opt_aux
        .ascend(&mut state.phi.aux_bias, &aux, config.lr_phi);
    state
        .opt_baseline
        .ascend(&mut state.baseline.params, &base, config.lr_phi);
    if train_theta {
        let lr = config.lr_phi * config.lr_theta_ratio;
        state
            .opt_failure
            .ascend(&mut state.theta.failure, &failure, lr);
        state.opt_leak.ascend(&mut state.theta.leak, &leak, lr);
        state.model = state.theta.to_model(&state.template)?;
    }
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / residuals.len() as f64;
    if state.steps == 0 {
        state.signal_mean = mean;
        state.signal_var = var;
    } else {
        let d = config.signal_decay;
        state.signal_mean = d * state.signal_mean + (1.0 - d) * mean;
        state.signal_var = d * state.signal_var + (1.0 - d) * var;
    }
    state.steps += 1;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub theta: ModelParams,
    pub phi: RecognitionParams,
    pub validation: AnchorScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub elbo: f64,
    pub supervised_loss: f64,
    pub validation_mrr: f64,
    pub validation_accuracy: f64,
    pub validation_log_score: f64,
    pub skipped_steps: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// epoch 0 is the initial network
    pub checkpoints: Vec<Checkpoint>,
    pub best: usize,
    pub log: Vec<LogRow>,
    pub centering: InputCentering,
}

impl TrainOutcome {
    pub fn best_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.best]
    }
}

/// Index of the checkpoint with the highest held-out anchor MRR; ties go to
/// the earliest.
pub fn select_checkpoint(checkpoints: &[Checkpoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, c) in checkpoints.iter().enumerate() {
        if best.is_none_or(|b| c.validation.mrr > checkpoints[b].validation.mrr) {
            best = Some(k);
        }
    }
    best
}

/// Runs burn-in (recognition model only) then joint training, scoring a
/// checkpoint by held-out anchor inference after every epoch that changed
/// the network. `on_epoch` sees each log row as it is produced.
pub fn train(
    train_set: &Dataset,
    validation: &Dataset,
    theta0: &ModelParams,
    noise: &NoiseModel,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    check_len("noise model", theta0.m(), noise.len())?;
    let centering = InputCentering::from_records(&train_set.records, theta0.n());
    let mut state = TrainState::new(theta0, centering.clone(), config)?;
    let score = |model: &ModelParams| {
        heldout_anchor_evaluation(model, &validation.records, noise, &config.selection_gibbs)
    };
    let initial = score(&state.model)?;
    let mut checkpoints = vec![Checkpoint {
        epoch: 0,
        theta: state.model.clone(),
        phi: state.phi.clone(),
        validation: initial,
    }];
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let total_epochs = config.burn_in_epochs + config.epochs;
    for epoch in 1..=total_epochs {
        let train_theta = epoch > config.burn_in_epochs;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let (mut elbo, mut sup, mut batches) = (0.0, 0.0, 0.0_f64);
        for (b, chunk) in order.chunks(config.minibatch).enumerate() {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&k| &train_set.records[k]).collect();
            let stream = mix(mix(config.seed, epoch as u64), b as u64 + 1);
            let st = nvil_step(&mut state, &batch, config, train_theta, stream)?;
            if !st.skipped {
                elbo += st.elbo;
                sup += st.supervised_loss;
                batches += 1.0;
            }
        }
        let validation_score = if train_theta {
            let s = score(&state.model)?;
            checkpoints.push(Checkpoint {
                epoch,
                theta: state.model.clone(),
                phi: state.phi.clone(),
                validation: s,
            });
            s
        } else {
            initial
        };
        let row = LogRow {
            epoch,
            elbo: elbo / batches.max(1.0),
            supervised_loss: sup / batches.max(1.0),
            validation_mrr: validation_score.mrr,
            validation_accuracy: validation_score.accuracy,
            validation_log_score: validation_score.mean_log_score,
            skipped_steps: state.skipped_steps,
        };
        on_epoch(&row);
        log.push(row);
    }
    let best = select_checkpoint(&checkpoints).expect("at least the initial checkpoint");
    Ok(TrainOutcome {
        checkpoints,
        best,
        log,
        centering,
    })
}

/// A network with priors from the anchor rates, anchor columns from the
/// noise model, and every other failure uniform in [0, 1] and leak uniform
/// in [0, 0.3]; the random-initialization ablation.
pub fn random_theta<R: Rng + ?Sized>(
    template: &ModelParams,
    dataset: &Dataset,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<ModelParams> {
    let (m, n) = (template.m(), template.n());
    let total = dataset.len().max(1) as f64;
    let mut parts = template.parts().clone();
    for i in 0..m {
        let p_a1 = dataset.records.iter().filter(|r| r.a[i]).count() as f64 / total;
        parts.priors[i] = estimate_prior(noise.get(i), p_a1)?.value;
    }
    for j in 0..n {
        if template.anchor_owner(j).is_some() {
            continue;
        }
        parts.leaks[j] = rng.gen_range(0.0..0.3);
        for i in 0..m {
            parts.failures[i * n + j] = rng.gen::<f64>();
        }
    }
    ModelParams::new(parts)?.with_anchor_noise(noise)
}

pub fn write_log_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDocument {
    version: u32,
    epoch: usize,
    validation: AnchorScore,
    model: ModelDocument,
    recognition_m: usize,
    recognition_n: usize,
    weights_file: String,
    weights_sha256: String,
}

fn blob_bytes(phi: &RecognitionParams) -> Vec<u8> {
    phi.weights
        .iter()
        .chain(&phi.aux_bias)
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

/// Writes `<stem>.json` and the little-endian f64 blob `<stem>.bin`
/// holding the recognition weights then auxiliary biases.
pub fn write_checkpoint(dir: &Path, stem: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
    let bytes = blob_bytes(&ckpt.phi);
    let blob_name = format!("{stem}.bin");
    std::fs::write(dir.join(&blob_name), &bytes)?;
    let doc = CheckpointDocument {
        version: CHECKPOINT_VERSION,
        epoch: ckpt.epoch,
        validation: ckpt.validation,
        model: ModelDocument::from_params(&ckpt.theta, None, false),
        recognition_m: ckpt.phi.m,
        recognition_n: ckpt.phi.n,
        weights_file: blob_name,
        weights_sha256: sha256_hex(&bytes),
    };
    let path = dir.join(format!("{stem}.json"));
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let doc: CheckpointDocument = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            doc.version
        )));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut bytes = Vec::new();
    File::open(dir.join(&doc.weights_file))?.read_to_end(&mut bytes)?;
    if sha256_hex(&bytes) != doc.weights_sha256 {
        return Err(Error::Data(format!(
            "{} does not match its recorded hash",
            doc.weights_file
        )));
    }
    let (m, n) = (doc.recognition_m, doc.recognition_n);
    let expected = (m * (n + 1) + m) * 8;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "weight blob has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (weights, aux) = values.split_at(m * (n + 1));
    let (theta, _) = doc.model.into_params()?;
    Ok(Checkpoint {
        epoch: doc.epoch,
        theta,
        phi: RecognitionParams {
            m,
            n,
            weights: weights.to_vec(),
            aux_bias: aux.to_vec(),
        },
        validation: doc.validation,
    })
}

/// Mean anchor-prediction loss over `records`.
pub fn mean_supervised_loss(
    phi: &RecognitionParams,
    centering: &InputCentering,
    records: &[PatientRecord],
    anchor_index: &[usize],
) -> f64 {
    let total: f64 = records
        .iter()
        .map(|r| {
            let xt = censor_anchors(&centering.centered(&r.x), anchor_index);
            supervised_term(phi, &xt, &r.a).unwrap_or(f64::NAN)
        })
        .sum();
    total / records.len().max(1) as f64
}
