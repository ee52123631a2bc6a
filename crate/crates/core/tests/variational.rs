mod common;

use clintag_core::inference::GibbsConfig;
use clintag_core::synth::{build_scenario, ScenarioSpec};
use clintag_core::variational::{
    elbo_estimate, nvil_step, read_checkpoint, recognition_posterior, score_function_sample,
    supervised_term, theta_gradient, train, write_checkpoint, Checkpoint, InputCentering,
    RecognitionParams, ThetaLogits, TrainConfig, TrainState,
};
use clintag_core::{ModelParams, PatientRecord};
use common::{bits, random_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn log_q(phi: &RecognitionParams, xbar: &[f64], y: &[bool]) -> f64 {
    let p = recognition_posterior(phi, xbar).unwrap();
    p.iter()
        .zip(y)
        .map(|(&pi, &yi)| if yi { pi.ln() } else { (1.0 - pi).ln() })
        .sum()
}

fn enumerated_elbo(model: &ModelParams, phi: &RecognitionParams, x: &[bool], xbar: &[f64]) -> f64 {
    let m = model.m();
    (0..1usize << m)
        .map(|mask| {
            let y = bits(mask, m);
            let lq = log_q(phi, xbar, &y);
            lq.exp() * (model.complete_loglik(x, &y).unwrap() - lq)
        })
        .sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_phi<R: Rng>(rng: &mut R, m: usize, n: usize) -> RecognitionParams {
    RecognitionParams {
        m,
        n,
        weights: (0..m * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        aux_bias: vec![0.0; m],
    }
}

#[test]
fn score_function_gradient_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = random_model(&mut rng, 3, 4);
    let phi = random_phi(&mut rng, 3, 4);
    let x = [true, false, true, false];
    let xbar = InputCentering {
        means: vec![0.4; 4],
    }
    .centered(&x);
    let exact = enumerated_elbo(&model, &phi, &x, &xbar);
    let h = 1e-5;
    let fd: Vec<f64> = (0..phi.weights.len())
        .map(|k| {
            let mut up = phi.clone();
            up.weights[k] += h;
            let mut down = phi.clone();
            down.weights[k] -= h;
            (enumerated_elbo(&model, &up, &x, &xbar) - enumerated_elbo(&model, &down, &x, &xbar))
                / (2.0 * h)
        })
        .collect();
    let samples = 100_000;
    let mut mean = vec![0.0; fd.len()];
    for _ in 0..samples {
        let (_, g) = score_function_sample(&model, &phi, &x, &xbar, exact, &mut rng);
        mean.iter_mut()
            .zip(&g)
            .for_each(|(m, v)| *m += v / samples as f64);
    }
    let err = rel_err(&mean, &fd);
    assert!(err < 0.02, "relative error {err}");
}

#[test]
fn elbo_estimate_converges_to_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let model = random_model(&mut rng, 3, 6);
    let phi = random_phi(&mut rng, 3, 6);
    let x = [false, true, true, false, true, false];
    let xbar = InputCentering::none(6).centered(&x);
    let exact = enumerated_elbo(&model, &phi, &x, &xbar);
    let est = elbo_estimate(&model, &phi, &x, &xbar, 200_000, &mut rng).unwrap();
    assert!((est - exact).abs() < 0.02, "{est} vs {exact}");
    assert!(exact <= common::brute_log_px(&model, &x) + 1e-12);
}

#[test]
fn theta_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let template = random_model(&mut rng, 3, 7);
    let theta = ThetaLogits::from_model(&template);
    let model = theta.to_model(&template).unwrap();
    let (m, n) = (3, 7);
    for _ in 0..5 {
        let x: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<bool> = (0..m).map(|_| rng.gen()).collect();
        let mut gf = vec![0.0; m * n];
        let mut gl = vec![0.0; n];
        theta_gradient(&model, &x, &y, 1.0, &mut gf, &mut gl);
        let f = |t: &ThetaLogits| {
            t.to_model(&template)
                .unwrap()
                .complete_loglik(&x, &y)
                .unwrap()
        };
        let h = 1e-6;
        for j in 0..n {
            if template.anchor_owner(j).is_some() {
                assert_eq!(gl[j], 0.0);
                continue;
            }
            let mut up = theta.clone();
            up.leak[j] += h;
            let mut down = theta.clone();
            down.leak[j] -= h;
            let want = (f(&up) - f(&down)) / (2.0 * h);
            assert!(
                (gl[j] - want).abs() < 1e-5 * (1.0 + want.abs()),
                "leak {j}: {} vs {want}",
                gl[j]
            );
            for i in 0..m {
                let k = i * n + j;
                let mut up = theta.clone();
                up.failure[k] += h;
                let mut down = theta.clone();
                down.failure[k] -= h;
                let want = (f(&up) - f(&down)) / (2.0 * h);
                assert!(
                    (gf[k] - want).abs() < 1e-5 * (1.0 + want.abs()),
                    "failure {i},{j}: {} vs {want}",
                    gf[k]
                );
            }
        }
    }
}

#[test]
fn supervised_term_is_log_loss() {
    let phi = RecognitionParams {
        m: 2,
        n: 1,
        weights: vec![1.0, 0.0, -1.0, 0.5],
        aux_bias: vec![0.0, -0.5],
    };
    let got = supervised_term(&phi, &[1.0, 1.0], &[true, false]).unwrap();
    let p0 = 1.0 / (1.0 + (-1.0f64).exp());
    let p1 = 1.0 / (1.0 + (1.0f64).exp());
    assert!((got - (-(p0.ln()) - (1.0 - p1).ln())).abs() < 1e-12);
}

fn small_scenario() -> (clintag_core::synth::Scenario, TrainConfig) {
    let spec = ScenarioSpec {
        m: 3,
        n: 12,
        n_records: 600,
        seed: 5,
        ..Default::default()
    };
    let cfg = TrainConfig {
        burn_in_epochs: 2,
        epochs: 3,
        minibatch: 32,
        lr_phi: 1e-2,
        baseline_hidden: 8,
        validation_size: 100,
        selection_gibbs: GibbsConfig {
            chains: 1,
            burn_in: 10,
            kept: 50,
            thin: 1,
            seed: 0,
        },
        ..Default::default()
    };
    (build_scenario(&spec, 200).unwrap(), cfg)
}

fn run_step_in_pool(
    threads: usize,
    state: &TrainState,
    batch: &[&PatientRecord],
    cfg: &TrainConfig,
) -> TrainState {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    let mut s = state.clone();
    pool.install(|| {
        for k in 0..3 {
            nvil_step(&mut s, batch, cfg, k > 0, 99 + k).unwrap();
        }
    });
    s
}

#[test]
fn updates_do_not_depend_on_thread_count() {
    let (sc, cfg) = small_scenario();
    let centering = InputCentering::from_records(&sc.train.records, sc.truth.n());
    let state = TrainState::new(&sc.truth, centering, &cfg).unwrap();
    let batch: Vec<&PatientRecord> = sc.train.records.iter().take(40).collect();
    let a = run_step_in_pool(1, &state, &batch, &cfg);
    let b = run_step_in_pool(4, &state, &batch, &cfg);
    assert_eq!(a.phi, b.phi);
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.baseline, b.baseline);
    assert_ne!(a.theta, state.theta);
}

#[test]
fn training_is_reproducible_and_keeps_anchor_columns() {
    let (sc, cfg) = small_scenario();
    let (tr, val) = sc.train.split_validation(cfg.validation_size).unwrap();
    let run = || train(&tr, &val, &sc.truth, &sc.noise, &cfg, |_| {}).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.checkpoints.len(), 1 + cfg.epochs);
    assert_eq!(a.log.len(), cfg.burn_in_epochs + cfg.epochs);
    assert_eq!(a.best, b.best);
    assert_eq!(a.best_checkpoint().theta, b.best_checkpoint().theta);
    let last = &a.checkpoints.last().unwrap().theta;
    for i in 0..sc.truth.m() {
        let j = sc.truth.anchor_column(i);
        assert_eq!(last.leaks()[j], sc.truth.leaks()[j]);
        for k in 0..sc.truth.m() {
            assert_eq!(last.failure(k, j), sc.truth.failure(k, j));
        }
    }
    assert_eq!(last.priors(), sc.truth.priors());
    assert!(a.log.iter().all(|r| r.elbo.is_finite()));
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let model = random_model(&mut rng, 3, 6);
    let ckpt = Checkpoint {
        epoch: 7,
        theta: model,
        phi: random_phi(&mut rng, 3, 6),
        validation: clintag_core::inference::AnchorScore {
            mrr: 0.75,
            accuracy: 0.5,
            mean_log_score: -0.3,
            n_records: 12,
        },
    };
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), "epoch-7", &ckpt).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
    let blob = dir.path().join("epoch-7.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(read_checkpoint(&path).is_err());
}
