//! Held-out tag task: instance construction, ranking metrics and reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::NoiseTolerantModel;
use crate::error::{Error, Result};
use crate::inference::exact_last_tag;
use crate::model::ModelParams;
use crate::record::Dataset;

/// One record with every true condition known except `target`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagTaskInstance {
    pub record_id: String,
    pub x: Vec<bool>,
    pub known: Vec<usize>,
    pub target: usize,
}

/// Records with at least two true conditions, each with one positive label
/// removed uniformly at random. Record `k` draws from stream `k` of the seed.
pub fn make_task_instances(dataset: &Dataset, seed: u64) -> Result<Vec<TagTaskInstance>> {
    if !dataset.is_labeled() {
        return Err(Error::Data(
            "held-out tag task needs true labels on every record".into(),
        ));
    }
    Ok(dataset
        .records
        .iter()
        .enumerate()
        .filter_map(|(k, r)| {
            let y = r.y.as_ref()?;
            let positives: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
            if positives.len() < 2 {
                return None;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let target = positives[rng.gen_range(0..positives.len())];
            Some(TagTaskInstance {
                record_id: r.id.clone(),
                x: r.x.clone(),
                known: positives.into_iter().filter(|&i| i != target).collect(),
                target,
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub top5: f64,
    pub mrr: f64,
    pub n_instances: usize,
}

impl Metrics {
    /// From 1-based ranks of the correct answer.
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Data("no instances to evaluate".into()));
        }
        if ranks.contains(&0) {
            return Err(Error::Data("ranks are 1-based".into()));
        }
        let n = ranks.len() as f64;
        Ok(Self {
            accuracy: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
            top5: ranks.iter().filter(|&&r| r <= 5).count() as f64 / n,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            n_instances: ranks.len(),
        })
    }

    /// Half-width of a normal-approximation 95% interval on accuracy.
    pub fn accuracy_ci95(&self) -> f64 {
        1.96 * (self.accuracy * (1.0 - self.accuracy) / self.n_instances as f64).sqrt()
    }
}

/// 1-based position of `target` in `ranking`; a missing target ranks last.
pub fn rank_of(ranking: &[usize], target: usize) -> usize {
    ranking
        .iter()
        .position(|&c| c == target)
        .map_or(ranking.len() + 1, |p| p + 1)
}

/// `predict` returns candidate conditions best first.
pub fn evaluate_model<F>(predict: F, instances: &[TagTaskInstance]) -> Result<Metrics>
where
    F: Fn(&TagTaskInstance) -> Result<Vec<usize>> + Sync,
{
    let ranks = instances
        .par_iter()
        .map(|inst| Ok(rank_of(&predict(inst)?, inst.target)))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_ranks(&ranks)
}

/// Ranking by exact last-tag inference in a noisy-or model.
pub fn noisy_or_ranking(model: &ModelParams, inst: &TagTaskInstance) -> Result<Vec<usize>> {
    Ok(exact_last_tag(model, &inst.x, &inst.known)?
        .ranking()
        .into_iter()
        .map(|(i, _)| i)
        .collect())
}

/// Ranking of the unknown conditions by classifier score, ties by index.
pub fn classifier_ranking(
    model: &NoiseTolerantModel,
    inst: &TagTaskInstance,
) -> Result<Vec<usize>> {
    let scores = model.predict(&inst.x);
    let mut cands: Vec<usize> = (0..scores.len())
        .filter(|i| !inst.known.contains(i))
        .collect();
    cands.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(cands)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub accuracy: f64,
    pub top5: f64,
    pub mrr: f64,
    pub n_instances: usize,
    pub accuracy_ci95: f64,
}

impl ReportRow {
    pub fn new(model: impl Into<String>, m: &Metrics) -> Self {
        Self {
            model: model.into(),
            accuracy: m.accuracy,
            top5: m.top5,
            mrr: m.mrr,
            n_instances: m.n_instances,
            accuracy_ci95: m.accuracy_ci95(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// free-form notes such as the baseline feature set
    pub notes: Vec<String>,
}

impl Report {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        w.write_record(["Model", "Accuracy", "Top 5", "MRR", "Instances"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.top5),
                format!("{:.4}", r.mrr),
                r.n_instances.to_string(),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}
