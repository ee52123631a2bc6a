//! Subcommand sections and their runners. Each runner writes into the run
//! directory and returns the relative paths it produced.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clintag_core::baselines::{
    naive_labels_train, noise_tolerant_train, oracle_mle_train, MleConfig, NoiseTolerantConfig,
};
use clintag_core::eval::{
    classifier_ranking, evaluate_model, make_task_instances, noisy_or_ranking, Metrics, Report,
    ReportRow,
};
use clintag_core::inference::{heldout_anchor_evaluation, GibbsConfig};
use clintag_core::model_file::{read_model, read_noise, write_model, write_noise};
use clintag_core::moments::{moments_init, MomentsConfig};
use clintag_core::synth::{build_scenario, ScenarioSpec};
use clintag_core::text::{read_visits, AnchorSpec, LabelSpec, Vocabulary, VocabularyConfig};
use clintag_core::variational::{
    random_theta, read_checkpoint, select_checkpoint, train, write_checkpoint, write_log_csv,
    Checkpoint, TrainConfig,
};
use clintag_core::{Dataset, DatasetMeta, ModelParams, NoiseModel};
use clintag_service::{interactive_gibbs, AppState, LoadedModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::config::{parse, split_parse, table_of, Kind, SectionSpec};
use crate::error::CliError;

/// What a runner needs besides its section.
pub struct RunContext {
    pub out: PathBuf,
    pub deterministic: bool,
}

fn merged(a: Table, b: Table) -> Table {
    let mut t = a;
    crate::config::merge(&mut t, b);
    t
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn need(path: &Option<PathBuf>, section: &str, key: &str) -> Result<PathBuf, CliError> {
    path.clone().ok_or_else(|| {
        CliError::config(format!(
            "[{section}] `{key}` is required (flag --{})",
            key.replace('_', "-")
        ))
    })
}

/// Dataset meta from `meta` or from `meta.json` beside the records.
fn load_dataset(records: &Path, meta: Option<&Path>) -> Result<Dataset, CliError> {
    let meta_path = match meta {
        Some(p) => p.to_path_buf(),
        None => records.parent().unwrap_or(Path::new(".")).join("meta.json"),
    };
    let meta = DatasetMeta::read(&meta_path)
        .map_err(|e| CliError::data(format!("{}: {e}", meta_path.display())))?;
    Dataset::read_jsonl(records, meta)
        .map_err(|e| CliError::data(format!("{}: {e}", records.display())))
}

fn load_noise(path: &Path, m: usize) -> Result<NoiseModel, CliError> {
    let noise = read_noise(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if noise.len() != m {
        return Err(CliError::data(format!(
            "{} has {} noise entries for {m} conditions",
            path.display(),
            noise.len()
        )));
    }
    Ok(noise)
}

/// A model file, or the network of a training checkpoint.
fn load_model(
    path: &Path,
    meta: &DatasetMeta,
) -> Result<(ModelParams, Option<NoiseModel>), CliError> {
    let (params, noise) = match read_model(path) {
        Ok(model) => model,
        Err(e) => match read_checkpoint(path) {
            Ok(ckpt) => (ckpt.theta, None),
            Err(_) => return Err(CliError::data(format!("{}: {e}", path.display()))),
        },
    };
    meta.check_model(&params)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok((params, noise))
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthExtra {
    /// records drawn for the test set before the cohort filter
    pub n_test: usize,
}

impl Default for SynthExtra {
    fn default() -> Self {
        Self { n_test: 20_000 }
    }
}

pub const SYNTH: SectionSpec = SectionSpec {
    name: "synth",
    about: "Generate a ground-truth network and train/test datasets",
    defaults: || {
        merged(
            table_of(&SynthExtra::default()),
            table_of(&ScenarioSpec::default()),
        )
    },
    optional: &[("noise_rates", Kind::Literal)],
    paths: &[],
    seed_key: Some("seed"),
};

#[derive(Serialize)]
struct SynthSummary {
    n_train: usize,
    n_test: usize,
    test_raw: usize,
    test_retention: f64,
    cohort_min: usize,
}

pub fn run_synth(table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let (extra, spec): (SynthExtra, ScenarioSpec) = split_parse("synth", table, &["n_test"])?;
    spec.validate()?;
    let sc = build_scenario(&spec, extra.n_test)?;
    let out = &ctx.out;
    write_model(&out.join("truth.json"), &sc.truth, Some(&sc.noise), false)?;
    write_noise(&out.join("noise.json"), &sc.noise)?;
    DatasetMeta::from_model(&sc.truth).write(&out.join("meta.json"))?;
    sc.train.write_jsonl(&out.join("train.jsonl"))?;
    sc.test.write_jsonl(&out.join("test.jsonl"))?;
    write_json(
        &out.join("summary.json"),
        &SynthSummary {
            n_train: sc.train.len(),
            n_test: sc.test.len(),
            test_raw: sc.test_cohort.total,
            test_retention: sc.test_cohort.retention,
            cohort_min: spec.cohort_min,
        },
    )?;
    log::info!(
        "{} training records, {} of {} test records kept by the cohort filter",
        sc.train.len(),
        sc.test.len(),
        sc.test_cohort.total
    );
    Ok([
        "truth.json",
        "noise.json",
        "meta.json",
        "train.jsonl",
        "test.jsonl",
        "summary.json",
    ]
    .iter()
    .map(PathBuf::from)
    .collect())
}

// ---------------------------------------------------------------- ingest

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestExtra {
    /// JSONL of raw visits
    pub corpus: Option<PathBuf>,
    /// condition -> anchor tokens
    pub anchors: Option<PathBuf>,
    /// condition -> billing code prefixes, for evaluation labels
    pub labels: Option<PathBuf>,
    /// reuse this vocabulary instead of building one
    pub vocabulary: Option<PathBuf>,
}

pub const INGEST: SectionSpec = SectionSpec {
    name: "ingest",
    about: "Turn a raw visit corpus into binary feature records",
    defaults: || table_of(&VocabularyConfig::default()),
    optional: &[
        ("corpus", Kind::Path),
        ("anchors", Kind::Path),
        ("labels", Kind::Path),
        ("vocabulary", Kind::Path),
        ("bigrams", Kind::StrList),
    ],
    paths: &["corpus", "anchors", "labels", "vocabulary"],
    seed_key: None,
};

#[derive(Serialize)]
struct IngestSummary {
    n_records: usize,
    n_features: usize,
    conditions: Vec<String>,
    readded_anchors: Vec<String>,
    labeled: bool,
    vocabulary_sha256: String,
}

pub fn run_ingest(table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let (extra, vcfg): (IngestExtra, VocabularyConfig) = split_parse(
        "ingest",
        table,
        &["corpus", "anchors", "labels", "vocabulary"],
    )?;
    let corpus_path = need(&extra.corpus, "ingest", "corpus")?;
    let corpus = read_visits(&corpus_path)
        .map_err(|e| CliError::data(format!("{}: {e}", corpus_path.display())))?;
    let vocab = match &extra.vocabulary {
        Some(p) => {
            Vocabulary::read(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
        }
        None => {
            let anchors_path = need(&extra.anchors, "ingest", "anchors")?;
            let anchors = AnchorSpec::read(&anchors_path)?;
            Vocabulary::build(&corpus, &anchors, &vcfg)?
        }
    };
    let labels = extra.labels.as_deref().map(LabelSpec::read).transpose()?;
    let dataset = vocab.vectorize_all(&corpus, labels.as_ref());
    let out = &ctx.out;
    vocab.write(&out.join("vocabulary.json"))?;
    vocab.meta().write(&out.join("meta.json"))?;
    dataset.write_jsonl(&out.join("dataset.jsonl"))?;
    write_json(
        &out.join("summary.json"),
        &IngestSummary {
            n_records: dataset.len(),
            n_features: vocab.n(),
            conditions: vocab.conditions.clone(),
            readded_anchors: vocab.readded_anchors.clone(),
            labeled: dataset.is_labeled(),
            vocabulary_sha256: vocab.content_hash()?,
        },
    )?;
    log::info!("{} records over {} features", dataset.len(), vocab.n());
    Ok([
        "vocabulary.json",
        "meta.json",
        "dataset.jsonl",
        "summary.json",
    ]
    .iter()
    .map(PathBuf::from)
    .collect())
}

// ---------------------------------------------------------------- init

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataExtra {
    pub dataset: Option<PathBuf>,
    /// defaults to meta.json beside the dataset
    pub meta: Option<PathBuf>,
    pub noise: Option<PathBuf>,
}

pub const INIT: SectionSpec = SectionSpec {
    name: "init",
    about: "Method-of-moments initial network from anchors",
    defaults: || table_of(&MomentsConfig::default()),
    optional: &[
        ("dataset", Kind::Path),
        ("meta", Kind::Path),
        ("noise", Kind::Path),
    ],
    paths: &["dataset", "meta", "noise"],
    seed_key: None,
};

pub fn run_init(table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let (extra, mcfg): (DataExtra, MomentsConfig) =
        split_parse("init", table, &["dataset", "meta", "noise"])?;
    let dataset = load_dataset(
        &need(&extra.dataset, "init", "dataset")?,
        extra.meta.as_deref(),
    )?;
    let noise = load_noise(&need(&extra.noise, "init", "noise")?, dataset.meta.m)?;
    let outcome = moments_init(&dataset, &noise, &mcfg)?;
    write_model(
        &ctx.out.join("model.json"),
        &outcome.params,
        Some(&noise),
        false,
    )?;
    write_json(&ctx.out.join("moments_report.json"), &outcome.report)?;
    let r = &outcome.report;
    log::info!(
        "{} pairs: {} not converged, {} degenerate, {} failures and {} leaks clipped",
        r.pairs.len(),
        r.not_converged,
        r.degenerate_pairs,
        r.failures_clipped,
        r.leaks_clipped
    );
    Ok(vec!["model.json".into(), "moments_report.json".into()])
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainExtra {
    pub dataset: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    /// initial network, usually the output of `init`
    pub init: Option<PathBuf>,
    /// start from a random network instead of `init`
    pub random_init: bool,
    pub init_seed: u64,
    /// one training run per value; overrides `weight_decay`
    pub weight_decays: Option<Vec<f64>>,
}

const TRAIN_EXTRA: [&str; 7] = [
    "dataset",
    "meta",
    "noise",
    "init",
    "random_init",
    "init_seed",
    "weight_decays",
];

pub const TRAIN: SectionSpec = SectionSpec {
    name: "train",
    about: "Semi-supervised variational training with checkpoint selection",
    defaults: || {
        merged(
            table_of(&TrainExtra::default()),
            table_of(&TrainConfig::default()),
        )
    },
    optional: &[
        ("dataset", Kind::Path),
        ("meta", Kind::Path),
        ("noise", Kind::Path),
        ("init", Kind::Path),
        ("weight_decays", Kind::FloatList),
    ],
    paths: &["dataset", "meta", "noise", "init"],
    seed_key: Some("seed"),
};

/// One scored checkpoint in a selection table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Candidate {
    pub source: String,
    pub weight_decay: Option<f64>,
    pub epoch: usize,
    pub validation_mrr: f64,
    pub validation_accuracy: f64,
    pub validation_log_score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    pub selected: usize,
    pub candidates: Vec<Candidate>,
}

fn candidate(source: String, weight_decay: Option<f64>, c: &Checkpoint) -> Candidate {
    Candidate {
        source,
        weight_decay,
        epoch: c.epoch,
        validation_mrr: c.validation.mrr,
        validation_accuracy: c.validation.accuracy,
        validation_log_score: c.validation.mean_log_score,
    }
}

pub fn run_train(table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let (extra, cfg): (TrainExtra, TrainConfig) = split_parse("train", table, &TRAIN_EXTRA)?;
    cfg.validate()?;
    let dataset = load_dataset(
        &need(&extra.dataset, "train", "dataset")?,
        extra.meta.as_deref(),
    )?;
    let noise = load_noise(&need(&extra.noise, "train", "noise")?, dataset.meta.m)?;
    let (train_set, validation) = dataset.split_validation(cfg.validation_size)?;
    let theta0 = if extra.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(extra.init_seed);
        random_theta(
            &dataset.meta.template_model()?,
            &train_set,
            &noise,
            &mut rng,
        )?
    } else {
        let (p, _) = load_model(&need(&extra.init, "train", "init")?, &dataset.meta)?;
        p.with_anchor_noise(&noise)?
    };
    let grid = extra
        .weight_decays
        .clone()
        .unwrap_or_else(|| vec![cfg.weight_decay]);
    if grid.is_empty() {
        return Err(CliError::config("[train] `weight_decays` is empty"));
    }
    let mut outputs = Vec::new();
    let mut pooled: Vec<Checkpoint> = Vec::new();
    let mut candidates = Vec::new();
    for (k, &wd) in grid.iter().enumerate() {
        let run_cfg = TrainConfig {
            weight_decay: wd,
            ..cfg.clone()
        };
        let rel = PathBuf::from(format!("wd-{k}"));
        let ckpt_rel = rel.join("checkpoints");
        std::fs::create_dir_all(ctx.out.join(&ckpt_rel))?;
        log::info!("training with weight decay {wd}");
        let outcome = train(&train_set, &validation, &theta0, &noise, &run_cfg, |row| {
            log::info!(
                "epoch {}: elbo {:.4}, anchor loss {:.4}, validation mrr {:.4}",
                row.epoch,
                row.elbo,
                row.supervised_loss,
                row.validation_mrr
            )
        })?;
        let log_rel = rel.join("log.csv");
        write_log_csv(&ctx.out.join(&log_rel), &outcome.log)?;
        outputs.push(log_rel);
        for c in &outcome.checkpoints {
            let stem = format!("epoch-{:04}", c.epoch);
            write_checkpoint(&ctx.out.join(&ckpt_rel), &stem, c)?;
            outputs.push(ckpt_rel.join(format!("{stem}.json")));
            outputs.push(ckpt_rel.join(format!("{stem}.bin")));
            candidates.push(candidate(
                ckpt_rel
                    .join(format!("{stem}.json"))
                    .to_string_lossy()
                    .into_owned(),
                Some(wd),
                c,
            ));
        }
        pooled.extend(outcome.checkpoints);
    }
    let best = select_checkpoint(&pooled).expect("every run has an initial checkpoint");
    write_model(
        &ctx.out.join("model.json"),
        &pooled[best].theta,
        Some(&noise),
        false,
    )?;
    write_json(
        &ctx.out.join("selection.json"),
        &Selection {
            selected: best,
            candidates,
        },
    )?;
    log::info!(
        "selected epoch {} (weight decay {}) with validation mrr {:.4}",
        pooled[best].epoch,
        grid[best / (cfg.epochs + 1)],
        pooled[best].validation.mrr
    );
    outputs.push("model.json".into());
    outputs.push("selection.json".into());
    Ok(outputs)
}

// ---------------------------------------------------------------- select

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectExtra {
    pub dataset: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    /// checkpoint files or directories of them
    pub checkpoints: Vec<PathBuf>,
    /// the last records of `dataset` used for scoring
    pub validation_size: usize,
}

impl Default for SelectExtra {
    fn default() -> Self {
        Self {
            dataset: None,
            meta: None,
            noise: None,
            checkpoints: Vec::new(),
            validation_size: TrainConfig::default().validation_size,
        }
    }
}

pub const SELECT: SectionSpec = SectionSpec {
    name: "select",
    about: "Score checkpoints by held-out anchor inference and keep the best",
    defaults: || {
        merged(
            table_of(&SelectExtra::default()),
            table_of(&TrainConfig::default().selection_gibbs),
        )
    },
    optional: &[
        ("dataset", Kind::Path),
        ("meta", Kind::Path),
        ("noise", Kind::Path),
    ],
    paths: &["dataset", "meta", "noise", "checkpoints"],
    seed_key: Some("seed"),
};

fn expand_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            files.retain(|f| f.extension().is_some_and(|x| x == "json"));
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::config("[select] no checkpoints given"));
    }
    Ok(out)
}

pub fn run_select(table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let (extra, gibbs): (SelectExtra, GibbsConfig) = split_parse(
        "select",
        table,
        &["dataset", "meta", "noise", "checkpoints", "validation_size"],
    )?;
    gibbs.validate()?;
    let dataset = load_dataset(
        &need(&extra.dataset, "select", "dataset")?,
        extra.meta.as_deref(),
    )?;
    let noise = load_noise(&need(&extra.noise, "select", "noise")?, dataset.meta.m)?;
    let (_, validation) = dataset.split_validation(extra.validation_size)?;
    let mut scored = Vec::new();
    let mut candidates = Vec::new();
    for path in expand_checkpoints(&extra.checkpoints)? {
        let mut c = read_checkpoint(&path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        dataset
            .meta
            .check_model(&c.theta)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        c.validation = heldout_anchor_evaluation(&c.theta, &validation.records, &noise, &gibbs)?;
        log::info!("{}: validation mrr {:.4}", path.display(), c.validation.mrr);
        candidates.push(candidate(path.to_string_lossy().into_owned(), None, &c));
        scored.push(c);
    }
    let best = select_checkpoint(&scored).expect("nonempty checkpoint list");
    write_model(
        &ctx.out.join("model.json"),
        &scored[best].theta.with_anchor_noise(&noise)?,
        Some(&noise),
        false,
    )?;
    write_json(
        &ctx.out.join("selection.json"),
        &Selection {
            selected: best,
            candidates,
        },
    )?;
    Ok(vec!["model.json".into(), "selection.json".into()])
}

// ---------------------------------------------------------------- eval

pub const NAIVE: &str = "naive_labels";
pub const ORACLE: &str = "oracle_mle";
pub const NOISE_TOLERANT: &str = "noise_tolerant";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// labeled test records
    pub test: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    /// training records for the baselines
    pub train: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    /// report name -> noisy-or model file, reported in this order
    pub models: Table,
    pub baselines: Vec<String>,
    /// seed for choosing the held-out tag of each record
    pub seed: u64,
    pub mle: MleConfig,
    pub noise_tolerant: NoiseTolerantConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test: None,
            meta: None,
            train: None,
            noise: None,
            models: Table::new(),
            baselines: vec![NAIVE.into(), NOISE_TOLERANT.into(), ORACLE.into()],
            seed: 0,
            mle: MleConfig::default(),
            noise_tolerant: NoiseTolerantConfig::default(),
        }
    }
}

pub const EVAL: SectionSpec = SectionSpec {
    name: "eval",
    about: "Held-out tag report for models and baselines",
    defaults: || table_of(&EvalConfig::default()),
    optional: &[
        ("test", Kind::Path),
        ("meta", Kind::Path),
        ("train", Kind::Path),
        ("noise", Kind::Path),
        ("models", Kind::Literal),
    ],
    paths: &["test", "meta", "train", "noise", "models.*"],
    seed_key: Some("seed"),
};

fn check_metrics(name: &str, m: &Metrics) -> Result<(), CliError> {
    let ok = (0.0..=1.0).contains(&m.accuracy)
        && m.accuracy <= m.top5
        && m.accuracy <= m.mrr
        && m.top5 <= 1.0;
    if !ok {
        return Err(CliError::numeric(format!(
            "inconsistent metrics for {name}: {m:?}"
        )));
    }
    Ok(())
}

/// Evaluates the configured models and baselines.
pub fn evaluate(cfg: &EvalConfig) -> Result<Report, CliError> {
    let test = load_dataset(&need(&cfg.test, "eval", "test")?, cfg.meta.as_deref())?;
    let instances = make_task_instances(&test, cfg.seed)?;
    if instances.is_empty() {
        return Err(CliError::data(
            "no test record has two or more true conditions",
        ));
    }
    let mut report = Report::default();
    report.notes.push(format!(
        "{} held-out tag instances from {} test records",
        instances.len(),
        test.len()
    ));
    for (name, path) in &cfg.models {
        let path = path.as_str().ok_or_else(|| {
            CliError::config(format!("[eval] model {name:?} must map to a file path"))
        })?;
        let (params, _) = load_model(Path::new(path), &test.meta)?;
        let m = evaluate_model(|i| noisy_or_ranking(&params, i), &instances)?;
        report.rows.push(ReportRow::new(name.clone(), &m));
    }
    if !cfg.baselines.is_empty() {
        let train_path = need(&cfg.train, "eval", "train")?;
        let train_set = Dataset::read_jsonl(&train_path, test.meta.clone())
            .map_err(|e| CliError::data(format!("{}: {e}", train_path.display())))?;
        let template = test.meta.template_model()?;
        let noise = || -> Result<NoiseModel, CliError> {
            load_noise(&need(&cfg.noise, "eval", "noise")?, test.meta.m)
        };
        for b in &cfg.baselines {
            let m = match b.as_str() {
                NAIVE => {
                    let fit = naive_labels_train(&train_set, &template, &noise()?, &cfg.mle)?;
                    evaluate_model(|i| noisy_or_ranking(&fit.params, i), &instances)?
                }
                ORACLE => {
                    let fit = oracle_mle_train(&train_set, &template, &cfg.mle)?;
                    evaluate_model(|i| noisy_or_ranking(&fit.params, i), &instances)?
                }
                NOISE_TOLERANT => {
                    let model = noise_tolerant_train(&train_set, &noise()?, &cfg.noise_tolerant)?;
                    report
                        .notes
                        .push("noise_tolerant: one classifier per condition over all features except its own anchor".into());
                    evaluate_model(|i| classifier_ranking(&model, i), &instances)?
                }
                other => {
                    return Err(CliError::config(format!(
                        "[eval] unknown baseline {other:?}; expected {NAIVE}, {ORACLE} or {NOISE_TOLERANT}"
                    )))
                }
            };
            report.rows.push(ReportRow::new(b.clone(), &m));
        }
    }
    for r in &report.rows {
        check_metrics(
            &r.model,
            &Metrics {
                accuracy: r.accuracy,
                top5: r.top5,
                mrr: r.mrr,
                n_instances: r.n_instances,
            },
        )?;
    }
    Ok(report)
}

pub fn run_eval(table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let cfg: EvalConfig = parse("eval", table)?;
    let report = evaluate(&cfg)?;
    report.write_csv(&ctx.out.join("report.csv"))?;
    report.write_json(&ctx.out.join("report.json"))?;
    for r in &report.rows {
        log::info!(
            "{:<16} accuracy {:.4} ± {:.4}  top5 {:.4}  mrr {:.4}",
            r.model,
            r.accuracy,
            r.accuracy_ci95,
            r.top5,
            r.mrr
        );
    }
    Ok(vec!["report.csv".into(), "report.json".into()])
}

// ---------------------------------------------------------------- serve

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub model: Option<PathBuf>,
    pub addr: String,
    /// directory served at `/` instead of the built-in page
    pub ui_dir: Option<PathBuf>,
    /// poll interval for model file changes; 0 disables reloading
    pub reload_seconds: u64,
    pub sampler: GibbsConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            model: None,
            addr: "127.0.0.1:8080".into(),
            ui_dir: None,
            reload_seconds: 2,
            sampler: interactive_gibbs(),
        }
    }
}

pub const SERVE: SectionSpec = SectionSpec {
    name: "serve",
    about: "Serve the tagging API and UI over a model file",
    defaults: || table_of(&ServeConfig::default()),
    optional: &[("model", Kind::Path), ("ui_dir", Kind::Path)],
    paths: &["model", "ui_dir"],
    seed_key: Some("sampler.seed"),
};

pub fn run_serve(table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    let cfg: ServeConfig = parse("serve", table)?;
    cfg.sampler.validate()?;
    let addr: std::net::SocketAddr = cfg
        .addr
        .parse()
        .map_err(|e| CliError::config(format!("[serve] addr {:?}: {e}", cfg.addr)))?;
    let model_path = need(&cfg.model, "serve", "model")?;
    let model = LoadedModel::from_path(&model_path)
        .map_err(|e| CliError::data(format!("{}: {e}", model_path.display())))?;
    log::info!(
        "loaded {} ({} conditions, {} features, version {})",
        model_path.display(),
        model.params.m(),
        model.params.n(),
        model.version
    );
    let mut state = AppState::new(Some(model), cfg.ui_dir.clone());
    state.sampler_defaults = cfg.sampler;
    let state = Arc::new(state);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        if cfg.reload_seconds > 0 && !ctx.deterministic {
            clintag_service::spawn_reloader(state.clone(), Duration::from_secs(cfg.reload_seconds));
        }
        clintag_service::serve(addr, state).await
    })?;
    Ok(Vec::new())
}

pub const SECTIONS: [&SectionSpec; 7] = [&SYNTH, &INGEST, &INIT, &TRAIN, &SELECT, &EVAL, &SERVE];

pub fn dispatch(name: &str, table: Table, ctx: &RunContext) -> Result<Vec<PathBuf>, CliError> {
    match name {
        "synth" => run_synth(table, ctx),
        "ingest" => run_ingest(table, ctx),
        "init" => run_init(table, ctx),
        "train" => run_train(table, ctx),
        "select" => run_select(table, ctx),
        "eval" => run_eval(table, ctx),
        "serve" => run_serve(table, ctx),
        other => Err(CliError::config(format!("unknown subcommand {other}"))),
    }
}
