//! Multi-run experiments: training-data combinations by degree bucket and
//! hyperparameter grids.

use serde::{Deserialize, Serialize};

use super::{predict, train, vocab_for, TrainConfig, TrainReport};
use crate::corpus::{group_for_eval, DialogueExample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, pair_scores, ScoreBundle};
use crate::model::{
    encode_example, load_checkpoint, mean_predictive_entropy, sequence_logprob, ReferenceModel, Seq2seqModel,
};
use crate::overassoc::{corpus_report, pearson, Bucket};
use crate::textnorm::{default_normalizer, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub combo: Vec<Bucket>,
    pub train_examples: usize,
    pub best_step: usize,
    pub best_sum: f64,
    /// Dev subsets 1, 2, 3 and the full dev split; `None` for an empty subset.
    pub subset_scores: [Option<ScoreBundle>; 4],
    /// Mean teacher-forced predictive entropy over all dev examples.
    pub dev_entropy: f64,
    /// (step, dev CE) at every evaluation.
    pub dev_ce_curve: Vec<(usize, f64)>,
    /// Mean probability of the gold query per dev bucket.
    pub gold_prob_by_bucket: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn model_for(config: &TrainConfig, full_train: &[DialogueExample]) -> Result<ReferenceModel> {
    match &config.init_checkpoint {
        Some(path) => load_checkpoint(path),
        None => ReferenceModel::new(vocab_for(full_train, config.min_count), config.model.clone()),
    }
}

fn combo_label(combo: &[Bucket]) -> String {
    combo.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("+")
}

/// Trains one model per bucket combination and evaluates each on the dev
/// subsets. All runs share one vocabulary built from the full training
/// split. With `out_dir` set, each run writes into a `combo_<buckets>`
/// subdirectory.
pub fn diagnostics_sweep(
    config: &TrainConfig,
    train_examples: &[DialogueExample],
    dev_examples: &[DialogueExample],
    combos: &[Vec<Bucket>],
) -> Result<SweepTable> {
    if combos.is_empty() {
        return Err(Error::Config("no bucket combinations given".into()));
    }
    if dev_examples.is_empty() {
        return Err(Error::Config("dev split is empty".into()));
    }
    let normalizer = default_normalizer(config.lang);
    let train_report = corpus_report(train_examples, normalizer.as_ref())?;
    let dev_report = corpus_report(dev_examples, normalizer.as_ref())?;
    let dev_by_bucket: Vec<Vec<DialogueExample>> = Bucket::ALL
        .iter()
        .map(|b| {
            dev_examples
                .iter()
                .zip(&dev_report.per_example)
                .filter(|(_, e)| e.bucket == *b)
                .map(|(ex, _)| ex.clone())
                .collect()
        })
        .collect();
    let all_groups = group_for_eval(dev_examples);
    let mut subset_groups: Vec<_> = dev_by_bucket.iter().map(|s| group_for_eval(s)).collect();
    subset_groups.push(all_groups.clone());

    let mut rows = Vec::new();
    for combo in combos {
        if combo.is_empty() {
            return Err(Error::Config("empty bucket combination".into()));
        }
        let subset: Vec<DialogueExample> = train_examples
            .iter()
            .zip(&train_report.per_example)
            .filter(|(_, e)| combo.contains(&e.bucket))
            .map(|(ex, _)| ex.clone())
            .collect();
        if subset.is_empty() {
            return Err(Error::Validation(format!(
                "bucket combination {} selects no training examples",
                combo_label(combo)
            )));
        }
        let mut cfg = config.clone();
        cfg.out_dir = config
            .out_dir
            .as_ref()
            .map(|d| d.join(format!("combo_{}", combo_label(combo).replace('+', "_"))));
        let mut model = model_for(&cfg, train_examples)?;
        log::info!("sweep: training on buckets {} ({} examples)", combo_label(combo), subset.len());
        let report = train(&cfg, &subset, &all_groups, &mut model)?;
        rows.push(sweep_row(combo, subset.len(), &report, &model, &subset_groups, &dev_by_bucket, dev_examples, normalizer.as_ref(), cfg.eval_beam)?);
    }
    Ok(SweepTable { rows })
}

#[allow(clippy::too_many_arguments)]
fn sweep_row(
    combo: &[Bucket],
    train_examples: usize,
    report: &TrainReport,
    model: &dyn Seq2seqModel,
    subset_groups: &[Vec<crate::corpus::EvalGroup>],
    dev_by_bucket: &[Vec<DialogueExample>],
    dev_examples: &[DialogueExample],
    normalizer: &dyn Normalizer,
    beam: usize,
) -> Result<SweepRow> {
    let preds = predict(model, &subset_groups[3], beam)?;
    let map = preds.into_iter().map(|p| (p.context_id, p.prediction)).collect();
    let mut subset_scores = [None; 4];
    for (slot, groups) in subset_groups.iter().enumerate() {
        if !groups.is_empty() {
            subset_scores[slot] = Some(evaluate_split(&map, groups, normalizer)?);
        }
    }
    let mut gold_prob_by_bucket = [None; 3];
    for (slot, exs) in dev_by_bucket.iter().enumerate() {
        if exs.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for ex in exs {
            let (h, q) = encode_example(model, ex);
            total += sequence_logprob(model, &h, &q)?.exp();
        }
        gold_prob_by_bucket[slot] = Some(total / exs.len() as f64);
    }
    Ok(SweepRow {
        combo: combo.to_vec(),
        train_examples,
        best_step: report.best_step,
        best_sum: report.best_sum,
        subset_scores,
        dev_entropy: mean_predictive_entropy(model, dev_examples)?,
        dev_ce_curve: report.history.iter().map(|h| (h.step, h.dev_ce)).collect(),
        gold_prob_by_bucket,
    })
}

/// Values tried by [`grid_sweep`]; every combination is trained once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub kappas: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: usize,
    pub best_step: usize,
    pub best_sum: f64,
    pub best_scores: ScoreBundle,
}

pub fn grid_sweep(
    config: &TrainConfig,
    train_examples: &[DialogueExample],
    dev_examples: &[DialogueExample],
    grid: &GridSpec,
) -> Result<Vec<GridRow>> {
    if grid.alphas.is_empty() || grid.betas.is_empty() || grid.kappas.is_empty() {
        return Err(Error::Config("every grid axis needs at least one value".into()));
    }
    let groups = group_for_eval(dev_examples);
    let mut rows = Vec::new();
    for &alpha in &grid.alphas {
        for &beta in &grid.betas {
            for &kappa in &grid.kappas {
                let mut cfg = config.clone();
                cfg.weighting.alpha = alpha;
                cfg.weighting.beta = beta;
                cfg.weighting.kappa = kappa;
                cfg.out_dir = config
                    .out_dir
                    .as_ref()
                    .map(|d| d.join(format!("alpha{alpha}_beta{beta}_kappa{kappa}")));
                let mut model = model_for(&cfg, train_examples)?;
                let report = train(&cfg, train_examples, &groups, &mut model)?;
                rows.push(GridRow {
                    alpha,
                    beta,
                    kappa,
                    best_step: report.best_step,
                    best_sum: report.best_sum,
                    best_scores: report.best_scores,
                });
            }
        }
    }
    Ok(rows)
}

/// Pearson correlation between per-example degree and per-example Sum of
/// the model's prediction against that example's gold query.
pub fn degree_sum_correlation(
    model: &dyn Seq2seqModel,
    examples: &[DialogueExample],
    normalizer: &dyn Normalizer,
    beam: usize,
) -> Result<f64> {
    let report = corpus_report(examples, normalizer)?;
    let groups = group_for_eval(examples);
    let preds = predict(model, &groups, beam)?;
    let map: std::collections::HashMap<String, String> =
        preds.into_iter().map(|p| (p.context_id, p.prediction)).collect();
    let sums: Vec<f64> = examples
        .iter()
        .map(|e| pair_scores(&map[&e.context_id], &e.gold_query, normalizer).sum)
        .collect();
    pearson(&report.degrees(), &sums)
}
