//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Tolerances are fixed constants below.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use clintag_core::eval::{evaluate_model, Metrics, TagTaskInstance};
use clintag_core::inference::{exact_last_tag, gibbs_posterior, Evidence, GibbsConfig};
use clintag_core::moments::{
    build_noise_matrix, denoise_conditionals, mixing_weights, mixture_kl, moments_init, EgConfig,
    MomentsConfig,
};
use clintag_core::synth::{generate_dataset, generate_ground_truth, ScenarioSpec};
use clintag_core::text::{
    tokenize_with_negation, AnchorSpec, BigramSet, RawVisit, Vocabulary, VocabularyConfig,
};
use clintag_core::variational::{
    recognition_posterior, score_function_sample, InputCentering, RecognitionParams,
};
use clintag_core::{ModelParams, NoiseRates};
use clintag_service::{router, AppState, LoadedModel};
use common::{
    bits, brute_marginal_x0, brute_posterior, grid_min_kl, invert_noise, joint_prob, kl_by_bayes,
    random_model,
};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tower::ServiceExt;

const ORACLE_TOL: f64 = 1e-10;
const GIBBS_TOL: f64 = 0.01;
const GIBBS_REPLICATES: u64 = 16;
const GIBBS_EXACT: f64 = 1e-9;
const MOMENT_FAILURE_TOL: f64 = 0.03;
const MOMENT_LEAK_TOL: f64 = 0.03;
const MOMENT_PRIOR_TOL: f64 = 0.02;
const EG_INVERSE_TOL: f64 = 1e-6;
const EG_GRID_STEP: f64 = 1e-3;
const GRADIENT_REL_TOL: f64 = 0.02;
const SELECTION_TOL: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn enumeration_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut sum_err, mut qs_err, mut lt_err) = (0.0f64, 0.0f64, 0.0f64);
    let models = 24;
    for _ in 0..models {
        let m = rng.gen_range(1..=4);
        let n = rng.gen_range(m.max(2)..=6);
        let model = random_model(&mut rng, m, n);
        let mut total = 0.0;
        for xm in 0..1usize << n {
            let x = bits(xm, n);
            for ym in 0..1usize << m {
                total += model.complete_loglik(&x, &bits(ym, m)).unwrap().exp();
            }
        }
        sum_err = sum_err.max((total - 1.0).abs());
        for j in 0..n {
            qs_err = qs_err
                .max((model.quickscore_marginal(j).unwrap() - brute_marginal_x0(&model, j)).abs());
        }
        if m < 2 {
            continue;
        }
        for _ in 0..5 {
            let x: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let k = rng.gen_range(1..m);
            let mut order: Vec<usize> = (0..m).collect();
            for a in (1..m).rev() {
                order.swap(a, rng.gen_range(0..=a));
            }
            let known = &order[..k];
            let got = exact_last_tag(&model, &x, known).unwrap();
            let weights: Vec<f64> = got
                .candidates
                .iter()
                .map(|&u| {
                    let y: Vec<bool> = (0..m).map(|i| i == u || known.contains(&i)).collect();
                    joint_prob(&model, &x, &y)
                })
                .collect();
            let z: f64 = weights.iter().sum();
            let want: Vec<f64> = weights.iter().map(|w| w / z).collect();
            lt_err = lt_err.max(max_abs(&got.probabilities, &want));
        }
    }
    let worst = sum_err.max(qs_err).max(lt_err);
    outcome(
        worst <= ORACLE_TOL,
        format!("{models} models m<=4 n<=6; max error joint sum {sum_err:.1e}, quickscore {qs_err:.1e}, last tag {lt_err:.1e} (tol {ORACLE_TOL:.0e})"),
    )
}

fn gibbs_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let budgets = [1_000, 10_000, 100_000];
    let (mut monotone, mut single, mut exact_cases) = (0, 0, 0);
    let mut worst_final = 0.0f64;
    let cases = 10;
    for case in 0..cases {
        let m = rng.gen_range(5..=8);
        let n = m + rng.gen_range(3..=6);
        let model = random_model(&mut rng, m, n);
        let observed: Vec<Option<bool>> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < 0.8 {
                    Some(rng.gen())
                } else {
                    None
                }
            })
            .collect();
        let clamped: Vec<Option<bool>> = (0..m)
            .map(|_| {
                if rng.gen::<f64>() < 0.1 {
                    Some(rng.gen())
                } else {
                    None
                }
            })
            .collect();
        let want = brute_posterior(&model, &observed, &clamped);
        let ev = Evidence { observed, clamped };
        let runs: Vec<Vec<f64>> = budgets
            .iter()
            .map(|&kept| {
                (0..GIBBS_REPLICATES)
                    .map(|r| {
                        let cfg = GibbsConfig {
                            chains: 1,
                            burn_in: 500,
                            kept,
                            thin: 1,
                            seed: 7000 + 100 * r + case,
                        };
                        max_abs(
                            &gibbs_posterior(&model, &ev, &cfg).unwrap().marginals,
                            &want,
                        )
                    })
                    .collect()
            })
            .collect();
        let mean: Vec<f64> = runs
            .iter()
            .map(|e| e.iter().sum::<f64>() / e.len() as f64)
            .collect();
        let exact = mean.iter().all(|&e| e <= GIBBS_EXACT);
        if exact || mean.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
        if runs.windows(2).all(|w| w[1][0] < w[0][0]) {
            single += 1;
        }
        exact_cases += usize::from(exact);
        worst_final = runs[2].iter().fold(worst_final, |a, &b| a.max(b));
    }
    outcome(
        worst_final <= GIBBS_TOL && monotone >= 9,
        format!(
            "{cases} models m<=8, {GIBBS_REPLICATES} chains each; max error at 1e5 sweeps {worst_final:.4} (tol {GIBBS_TOL}); \
             mean error monotone in {monotone}/{cases} ({exact_cases} exact at every budget), single chain {single}/{cases}"
        ),
    )
}

fn moments_consistency() -> Outcome {
    let spec = ScenarioSpec::default();
    let (truth, noise) =
        generate_ground_truth(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).unwrap();
    let errs: Vec<(f64, f64, f64)> = [1_000, 10_000, 100_000]
        .iter()
        .map(|&n| {
            let ds = generate_dataset(&truth, &noise, n, 1003).unwrap();
            let est = moments_init(&ds, &noise, &MomentsConfig::default())
                .unwrap()
                .params;
            (
                max_abs(truth.failures(), est.failures()),
                max_abs(truth.leaks(), est.leaks()),
                max_abs(truth.priors(), est.priors()),
            )
        })
        .collect();
    let shrinking = errs
        .windows(2)
        .all(|w| w[1].0 < w[0].0 && w[1].1 < w[0].1 && w[1].2 < w[0].2);
    let (f, l, p) = errs[2];
    let trail: Vec<String> = errs
        .iter()
        .map(|(f, l, p)| format!("({f:.3},{l:.3},{p:.3})"))
        .collect();
    outcome(
        f <= MOMENT_FAILURE_TOL && l <= MOMENT_LEAK_TOL && p <= MOMENT_PRIOR_TOL && shrinking,
        format!(
            "m={} n={} noise {}/{}; max |f|,|l|,|pi| errors over N=1e3,1e4,1e5: {}",
            spec.m,
            spec.n,
            spec.anchor_false_negative,
            spec.anchor_false_positive,
            trail.join(" ")
        ),
    )
}

fn denoising_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let (mut interior, mut exterior, mut failures) = (0, 0, 0);
    let mut worst_gap = 0.0f64;
    let mut worst_margin = f64::NEG_INFINITY;
    for k in 0..120 {
        let noise = NoiseRates::new(rng.gen_range(0.6..0.98), rng.gen_range(0.01..0.3));
        let prior = rng.gen_range(0.05..0.5);
        let r = build_noise_matrix(noise);
        let w = mixing_weights(&r, prior);
        let p_xa = if k % 2 == 0 {
            let (u, v): (f64, f64) = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
            let truth = [u, v, 1.0 - u, 1.0 - v];
            let mut p = [0.0; 4];
            for x in 0..2 {
                for a in 0..2 {
                    p[x * 2 + a] = w[a][0] * truth[x * 2] + w[a][1] * truth[x * 2 + 1];
                }
            }
            p
        } else {
            let (s, t): (f64, f64) = (rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98));
            [s, t, 1.0 - s, 1.0 - t]
        };
        let inverse = invert_noise(&p_xa, noise.p_a1_y1, noise.p_a1_y0, prior).unwrap();
        let out = denoise_conditionals(&p_xa, &r, prior, &EgConfig::default());
        if inverse.iter().all(|v| (0.0..=1.0).contains(v)) {
            interior += 1;
            let gap = max_abs(&out.p_x_given_y, &inverse);
            worst_gap = worst_gap.max(gap);
            if gap > EG_INVERSE_TOL {
                failures += 1;
            }
        } else {
            exterior += 1;
            let ours = mixture_kl(&p_xa, &w, &out.p_x_given_y);
            let ours_bayes =
                kl_by_bayes(&p_xa, noise.p_a1_y1, noise.p_a1_y0, prior, &out.p_x_given_y);
            let grid = grid_min_kl(&p_xa, noise.p_a1_y1, noise.p_a1_y0, prior, EG_GRID_STEP);
            worst_margin = worst_margin.max(ours_bayes - grid);
            if ours_bayes > grid || (ours - ours_bayes).abs() > 1e-12 {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0 && interior + exterior >= 100 && interior > 0 && exterior > 0,
        format!(
            "{interior} interior, max |eg - inverse| {worst_gap:.1e} (tol {EG_INVERSE_TOL:.0e}); {exterior} exterior, max kl(eg) - min kl(grid {EG_GRID_STEP:.0e}) {worst_margin:.1e}"
        ),
    )
}

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

fn gradient_unbiasedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let (m, n) = (3, 4);
    let model = random_model(&mut rng, m, n);
    let phi = RecognitionParams {
        m,
        n,
        weights: (0..m * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        aux_bias: vec![0.0; m],
    };
    let x = [true, false, true, false];
    let xbar = InputCentering {
        means: vec![0.4; n],
    }
    .centered(&x);
    let elbo = enumerated_elbo(&model, &phi, &x, &xbar);
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
        let (_, g) = score_function_sample(&model, &phi, &x, &xbar, elbo, &mut rng);
        mean.iter_mut()
            .zip(&g)
            .for_each(|(acc, v)| *acc += v / samples as f64);
    }
    let diff: f64 = mean
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let err = diff / fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    outcome(
        err <= GRADIENT_REL_TOL,
        format!("m=3 n=4, 1e5 samples; relative error vs finite differences {err:.4} (tol {GRADIENT_REL_TOL})"),
    )
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn clintag(args: &[&str]) {
    let mut argv = vec!["clintag", "--deterministic"];
    argv.extend_from_slice(args);
    let code = clintag_cli::run(argv.clone());
    assert_eq!(code, 0, "{argv:?} exited with {code}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn report_rows(dir: &Path) -> BTreeMap<String, Value> {
    read_json(&dir.join("report.json"))["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["model"].as_str().unwrap().to_string(), r.clone()))
        .collect()
}

fn accuracy(rows: &BTreeMap<String, Value>, name: &str) -> f64 {
    rows[name]["accuracy"].as_f64().unwrap()
}

fn inline_table(models: &[(String, PathBuf)]) -> String {
    let items: Vec<String> = models
        .iter()
        .map(|(k, p)| format!("\"{k}\" = \"{}\"", s(p)))
        .collect();
    format!("{{ {} }}", items.join(", "))
}

struct PipelineRun {
    rows: BTreeMap<String, Value>,
    checkpoint_rows: BTreeMap<String, Value>,
    selected: String,
    elapsed: Duration,
}

fn run_pipeline(root: &Path) -> PipelineRun {
    let start = Instant::now();
    let data = root.join("synth");
    let init = root.join("init");
    let trained = root.join("train");
    let random = root.join("train-random");
    clintag(&["synth", "--out", &s(&data)]);
    let train_set = s(&data.join("train.jsonl"));
    let noise = s(&data.join("noise.json"));
    clintag(&[
        "init",
        "--out",
        &s(&init),
        "--dataset",
        &train_set,
        "--noise",
        &noise,
    ]);
    let init_model = s(&init.join("model.json"));
    clintag(&[
        "train",
        "--out",
        &s(&trained),
        "--dataset",
        &train_set,
        "--noise",
        &noise,
        "--init",
        &init_model,
    ]);
    clintag(&[
        "train",
        "--out",
        &s(&random),
        "--dataset",
        &train_set,
        "--noise",
        &noise,
        "--init",
        &init_model,
        "--random-init",
        "true",
    ]);
    let eval = root.join("eval");
    let models = inline_table(&[
        ("init".into(), init.join("model.json")),
        ("final".into(), trained.join("model.json")),
        ("random".into(), random.join("model.json")),
        ("truth".into(), data.join("truth.json")),
    ]);
    let test_set = s(&data.join("test.jsonl"));
    clintag(&[
        "eval",
        "--out",
        &s(&eval),
        "--test",
        &test_set,
        "--train",
        &train_set,
        "--noise",
        &noise,
        "--models",
        &models,
    ]);
    let selection = read_json(&trained.join("selection.json"));
    let candidates = selection["candidates"].as_array().unwrap();
    let selected = candidates[selection["selected"].as_u64().unwrap() as usize]["source"]
        .as_str()
        .unwrap()
        .to_string();
    let checkpoints: Vec<(String, PathBuf)> = candidates
        .iter()
        .map(|c| {
            let src = c["source"].as_str().unwrap().to_string();
            (src.clone(), trained.join(&src))
        })
        .collect();
    let ckpt_eval = root.join("eval-checkpoints");
    clintag(&[
        "eval",
        "--out",
        &s(&ckpt_eval),
        "--test",
        &test_set,
        "--models",
        &inline_table(&checkpoints),
        "--baselines",
        "[]",
    ]);
    PipelineRun {
        rows: report_rows(&eval),
        checkpoint_rows: report_rows(&ckpt_eval),
        selected,
        elapsed: start.elapsed(),
    }
}

fn pipeline_ordering(run: &PipelineRun) -> Outcome {
    let acc = |n: &str| accuracy(&run.rows, n);
    let chain = [
        "oracle_mle",
        "final",
        "init",
        "naive_labels",
        "noise_tolerant",
    ];
    let ordered = chain.windows(2).all(|w| acc(w[0]) >= acc(w[1]));
    let strict = acc("final") > acc("init");
    let ablation = acc("random") < acc("init");
    let within_budget = run.elapsed < Duration::from_secs(30 * 60);
    let n = run.rows["final"]["n_instances"].as_u64().unwrap();
    let listing: Vec<String> = chain
        .iter()
        .chain(&["random", "truth"])
        .map(|k| format!("{k} {:.4}", acc(k)))
        .collect();
    outcome(
        ordered && strict && ablation && within_budget,
        format!(
            "held-out tag accuracy on {n} instances: {}; ordering {ordered}, final > init {strict}, random < init {ablation}; {:.0}s",
            listing.join(", "),
            run.elapsed.as_secs_f64()
        ),
    )
}

fn model_selection(run: &PipelineRun) -> Outcome {
    let (best_name, best) = run
        .checkpoint_rows
        .iter()
        .map(|(k, r)| (k.clone(), r["accuracy"].as_f64().unwrap()))
        .fold((String::new(), f64::NEG_INFINITY), |a, b| {
            if b.1 > a.1 {
                b
            } else {
                a
            }
        });
    let chosen = accuracy(&run.checkpoint_rows, &run.selected);
    outcome(
        best - chosen <= SELECTION_TOL,
        format!(
            "{} checkpoints; selected {} at {chosen:.4}, best in hindsight {best_name} at {best:.4} (tol {SELECTION_TOL})",
            run.checkpoint_rows.len(),
            run.selected
        ),
    )
}

#[derive(serde::Deserialize)]
struct Golden {
    text: String,
    bigrams: Vec<String>,
    expected: Vec<String>,
}

fn text_pipeline() -> Outcome {
    let cases: Vec<Golden> = include_str!("../../core/tests/data/negation_golden.jsonl")
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let exact = cases
        .iter()
        .filter(|c| {
            let got =
                tokenize_with_negation(&c.text, &BigramSet::from_phrases(&c.bigrams).unwrap());
            got.join("|").as_bytes() == c.expected.join("|").as_bytes()
        })
        .count();
    let corpus: Vec<RawVisit> = (0..200)
        .map(|r| {
            let mut words = vec![];
            if r < 120 {
                words.push("frequent".to_string());
            }
            words.extend(
                (0..30)
                    .filter(|k| r % (k + 2) == 0)
                    .map(|k| format!("t{k}")),
            );
            if r % 50 == 0 {
                words.push("rareanchor".into());
            }
            if r < 90 {
                words.push("commonanchor".into());
            }
            RawVisit {
                id: format!("v{r}"),
                chief_complaint: words.join(" "),
                ..Default::default()
            }
        })
        .collect();
    let anchors = AnchorSpec(
        [
            ("common", "commonanchor"),
            ("rare", "rareanchor"),
            ("absent", "nowhere"),
        ]
        .iter()
        .map(|(c, t)| (c.to_string(), vec![t.to_string()]))
        .collect(),
    );
    let max_terms = 12;
    let vocab = Vocabulary::build(
        &corpus,
        &anchors,
        &VocabularyConfig {
            max_terms,
            bigrams: Some(Vec::new()),
            ..Default::default()
        },
    )
    .unwrap();
    let stopword_dropped =
        vocab.column("frequent").is_none() && vocab.document_frequency["frequent"] == 120;
    let n_ok = vocab.n() == max_terms + vocab.readded_anchors.len()
        && vocab.readded_anchors == ["anchor:absent", "anchor:rare"]
        && vocab.column("anchor:common").is_some_and(|j| j < max_terms);
    outcome(
        exact == 30 && cases.len() == 30 && stopword_dropped && n_ok,
        format!(
            "{exact}/{} golden cases byte-exact; >50% token dropped {stopword_dropped}; n = {} = {max_terms} terms + {} re-added anchors",
            cases.len(),
            vocab.n(),
            vocab.readded_anchors.len()
        ),
    )
}

fn metric_identities(run: &PipelineRun) -> Outcome {
    let fixture = [
        TagTaskInstance {
            record_id: "a".into(),
            x: vec![],
            known: vec![0],
            target: 1,
        },
        TagTaskInstance {
            record_id: "b".into(),
            x: vec![],
            known: vec![1],
            target: 3,
        },
        TagTaskInstance {
            record_id: "c".into(),
            x: vec![],
            known: vec![2],
            target: 0,
        },
    ];
    let rankings: BTreeMap<&str, Vec<usize>> = [
        ("a", vec![1, 2, 3, 4, 5, 6, 7]),
        ("b", vec![0, 2, 3, 4, 5, 6, 7]),
        ("c", vec![7, 6, 5, 4, 3, 1, 0]),
    ]
    .into_iter()
    .collect();
    let got = evaluate_model(|i| Ok(rankings[i.record_id.as_str()].clone()), &fixture).unwrap();
    let want = Metrics {
        accuracy: 1.0 / 3.0,
        top5: 2.0 / 3.0,
        mrr: (1.0 + 1.0 / 3.0 + 1.0 / 7.0) / 3.0,
        n_instances: 3,
    };
    let fixture_ok = got == want;
    let all_rows: Vec<&Value> = run
        .rows
        .values()
        .chain(run.checkpoint_rows.values())
        .collect();
    let violations = all_rows
        .iter()
        .filter(|r| {
            let (a, t, m) = (
                r["accuracy"].as_f64().unwrap(),
                r["top5"].as_f64().unwrap(),
                r["mrr"].as_f64().unwrap(),
            );
            !(a <= t && a <= m)
        })
        .count();
    outcome(
        fixture_ok && violations == 0,
        format!(
            "fixture (acc, top5, mrr) = ({:.4}, {:.4}, {:.4}) exact {fixture_ok}; {violations} violations of acc <= top5, acc <= mrr over {} evaluations",
            got.accuracy,
            got.top5,
            got.mrr,
            all_rows.len()
        ),
    )
}

fn service_determinism() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/demo/model.json");
    let state = Arc::new(AppState::new(
        Some(LoadedModel::from_path(&path).unwrap()),
        None,
    ));
    let body = serde_json::json!({
        "features": ["anchor:uti acute", "dysuria", "fever", "neg:vomiting"],
        "confirmed": ["fall acute"],
        "rejected": ["pneumonia acute"],
        "seed": 42
    })
    .to_string();
    let runtime = tokio::runtime::Builder::new_multi_thread().build().unwrap();
    let bodies: Vec<(StatusCode, Vec<u8>)> = runtime.block_on(async {
        let tasks: Vec<_> = (0..100)
            .map(|_| {
                let app = router(state.clone());
                let body = body.clone();
                tokio::spawn(async move {
                    let req = Request::post("/api/posterior")
                        .header("content-type", "application/json")
                        .body(Body::from(body))
                        .unwrap();
                    let res = app.oneshot(req).await.unwrap();
                    let status = res.status();
                    (
                        status,
                        res.into_body().collect().await.unwrap().to_bytes().to_vec(),
                    )
                })
            })
            .collect();
        let mut out = Vec::new();
        for t in tasks {
            out.push(t.await.unwrap());
        }
        out
    });
    let all_ok = bodies.iter().all(|(s, _)| *s == StatusCode::OK);
    let identical = bodies.iter().all(|(_, b)| *b == bodies[0].1);
    let v: Value = serde_json::from_slice(&bodies[0].1).unwrap();
    let prob = |name: &str| {
        v["posteriors"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["condition"] == name)
            .map(|p| p["probability"].as_f64().unwrap())
    };
    let clamps = prob("fall acute") == Some(1.0) && prob("pneumonia acute") == Some(0.0);
    outcome(
        all_ok && identical && clamps,
        format!("100 concurrent seeded replays: status 200 {all_ok}, byte-identical {identical}; clamped tags exactly 1/0 {clamps}"),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let selected =
        |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut timed = |name: &'static str, f: &dyn Fn() -> Outcome| {
        if !selected(name) {
            return;
        }
        let start = Instant::now();
        let o = f();
        results.push((name, o, start.elapsed()));
        let (name, o, t) = results.last().unwrap();
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.as_secs_f64()
        );
    };
    timed("enumeration-oracle", &enumeration_oracle);
    timed("gibbs-correctness", &gibbs_correctness);
    timed("moments-consistency", &moments_consistency);
    timed("denoising-optimality", &denoising_optimality);
    timed("gradient-unbiasedness", &gradient_unbiasedness);
    let root = tempfile::tempdir().unwrap();
    let run = ["pipeline-ordering", "model-selection", "metric-identities"]
        .iter()
        .any(|n| selected(n))
        .then(|| run_pipeline(root.path()));
    if let Some(run) = &run {
        timed("pipeline-ordering", &|| pipeline_ordering(run));
        timed("model-selection", &|| model_selection(run));
    }
    timed("text-pipeline", &text_pipeline);
    if let Some(run) = &run {
        timed("metric-identities", &|| metric_identities(run));
    }
    timed("service-determinism", &service_determinism);
    let failed = results.iter().filter(|(_, o, _)| !o.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
