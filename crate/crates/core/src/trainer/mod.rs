//! Training loop: batching, phase schedule and dev-set checkpoint selection.
//!
//! A run consists of one or two phases. Plain strategies train a single
//! phase. Model-based strategies (stepwise, wholeseq, combine) first run a
//! warm-up phase with CE or data weighting until dev Sum stops improving,
//! then restart from the best warm-up parameters with the model-based loss.
//! Each phase gets a fresh optimizer; the step counter of phase 2 continues
//! from the best step of phase 1.

pub mod config;
pub mod optim;
pub mod sweep;
pub mod synthetic;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{group_for_eval, DialogueExample, EvalGroup, PredictionRecord};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss_grad, stepwise_loss_grad, weighted_ce_loss_grad, wholeseq_loss, Strategy, WeightingConfig, PROB_EPS,
};
use crate::metrics::{evaluate_split, make_scoring_function, ScoreBundle, ScoringFunction};
use crate::model::{
    beam_search, entropy, greedy_decode, load_checkpoint, ModelConfig, ReferenceModel, Seq2seqModel, TokenId,
    Vocab,
};
use crate::overassoc::{corpus_report, degree};
use crate::textnorm::{default_normalizer, Normalizer};

pub use config::{TrainConfig, WarmupStrategy};
pub use optim::{clip_grad_norm, Adam, Optimizer};

pub const CHECKPOINT_FILE: &str = "best.ckpt.json";
pub const REPORT_FILE: &str = "report.json";
pub const UPDATE_LOG_FILE: &str = "updates.jsonl";

/// Loss used for the parameter updates of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseObjective {
    Ce,
    DataWeight,
    Stepwise,
    Wholeseq,
}

impl From<WarmupStrategy> for PhaseObjective {
    fn from(w: WarmupStrategy) -> Self {
        match w {
            WarmupStrategy::Ce => PhaseObjective::Ce,
            WarmupStrategy::DataWeight => PhaseObjective::DataWeight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub index: usize,
    pub objective: PhaseObjective,
    pub learning_rate: f64,
    pub train_examples: usize,
    pub start_step: usize,
    pub end_step: usize,
    pub best_step: usize,
    pub best_sum: f64,
    pub stopped_early: bool,
    /// Mean score of sampled candidates (wholeseq phases).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
}

/// One dev evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub phase: usize,
    pub scores: ScoreBundle,
    /// Token-level mean cross-entropy of the dev references.
    pub dev_ce: f64,
    /// Mean teacher-forced predictive entropy (nats).
    pub dev_entropy: f64,
}

/// One parameter update, as written to the update log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub phase: usize,
    pub objective: PhaseObjective,
    pub batch_size: usize,
    pub loss: f64,
    pub weight_mean: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub clamped: usize,
    pub grad_norm: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub phases: Vec<PhaseRecord>,
    pub history: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_sum: f64,
    pub best_scores: ScoreBundle,
    /// File name of the best checkpoint inside the output directory.
    pub checkpoint: Option<String>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub updates: Vec<UpdateRecord>,
}

/// Dev metrics of one model snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevEval {
    pub scores: ScoreBundle,
    pub ce: f64,
    pub entropy: f64,
}

/// Decodes one query per group: greedy for beam 1, otherwise the top beam
/// candidate.
pub fn predict(model: &dyn Seq2seqModel, groups: &[EvalGroup], beam: usize) -> Result<Vec<PredictionRecord>> {
    if beam == 0 {
        return Err(Error::Config("beam must be >= 1".into()));
    }
    groups
        .par_iter()
        .map(|g| {
            let hist = model.vocab().encode_history(&g.history(), model.max_input_len());
            let best = if beam == 1 {
                greedy_decode(model, &hist, model.max_output_len())?
            } else {
                beam_search(model, &hist, beam, model.max_output_len())?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Decode("beam search returned no candidates".into()))?
            };
            Ok(PredictionRecord {
                context_id: g.context_id.clone(),
                prediction: best.text,
            })
        })
        .collect()
}

fn reference_pairs(model: &dyn Seq2seqModel, groups: &[EvalGroup]) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let v = model.vocab();
    groups
        .iter()
        .flat_map(|g| {
            let hist = v.encode_history(&g.history(), model.max_input_len());
            g.references
                .iter()
                .map(move |r| (hist.clone(), v.encode_query(r, model.max_output_len())))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Token-level mean CE and mean entropy over teacher-forced reference
/// positions.
pub fn dev_ce_and_entropy(model: &dyn Seq2seqModel, groups: &[EvalGroup]) -> Result<(f64, f64)> {
    let pairs = reference_pairs(model, groups);
    let per: Vec<(f64, f64, usize)> = pairs
        .par_iter()
        .map(|(h, q)| {
            let dists = model.teacher_forced(h, q)?;
            let mut nll = 0.0;
            let mut ent = 0.0;
            for (d, &t) in dists.iter().zip(q) {
                let p = d[t as usize];
                nll -= if p < PROB_EPS { PROB_EPS.ln() } else { p.ln() };
                ent += entropy(d);
            }
            Ok((nll, ent, dists.len()))
        })
        .collect::<Result<_>>()?;
    let n: usize = per.iter().map(|p| p.2).sum();
    if n == 0 {
        return Err(Error::Validation("no dev references".into()));
    }
    let nll: f64 = per.iter().map(|p| p.0).sum();
    let ent: f64 = per.iter().map(|p| p.1).sum();
    Ok((nll / n as f64, ent / n as f64))
}

pub fn evaluate_model(
    model: &dyn Seq2seqModel,
    groups: &[EvalGroup],
    normalizer: &dyn Normalizer,
    beam: usize,
) -> Result<DevEval> {
    let preds = predict(model, groups, beam)?;
    let map = preds.into_iter().map(|p| (p.context_id, p.prediction)).collect();
    let scores = evaluate_split(&map, groups, normalizer)?;
    let (ce, entropy) = dev_ce_and_entropy(model, groups)?;
    Ok(DevEval { scores, ce, entropy })
}

/// Reference model for a training corpus: loaded from `init_checkpoint`
/// when set, otherwise freshly initialized over a vocabulary built from the
/// training histories and queries.
pub fn build_model(config: &TrainConfig, train_examples: &[DialogueExample]) -> Result<ReferenceModel> {
    if let Some(path) = &config.init_checkpoint {
        return load_checkpoint(path);
    }
    Ok(ReferenceModel::new(vocab_for(train_examples, config.min_count), config.model.clone())?)
}

pub fn vocab_for(examples: &[DialogueExample], min_count: usize) -> Vocab {
    let texts: Vec<String> = examples
        .iter()
        .flat_map(|e| [e.history(), e.gold_query.clone()])
        .collect();
    Vocab::build(texts.iter().map(String::as_str), min_count)
}

/// Deterministic seed derivation for per-epoch and per-instance streams.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

struct Instance {
    hist: Vec<TokenId>,
    gold: Vec<TokenId>,
    reference: String,
    degree: f64,
}

struct InstanceOut {
    loss: f64,
    weight: f64,
    clamped: bool,
    grad: Vec<f64>,
    reward: Option<f64>,
}

fn instance_update(
    model: &dyn Seq2seqModel,
    inst: &Instance,
    objective: PhaseObjective,
    weighting: &WeightingConfig,
    scorer: &dyn ScoringFunction,
    seed: u64,
) -> Result<InstanceOut> {
    let lg = match objective {
        PhaseObjective::Ce => ce_loss_grad(model, &inst.hist, &inst.gold)?,
        PhaseObjective::DataWeight => {
            weighted_ce_loss_grad(model, &inst.hist, &inst.gold, inst.degree, weighting.alpha)?
        }
        PhaseObjective::Stepwise => stepwise_loss_grad(model, &inst.hist, &inst.gold, weighting.beta)?,
        PhaseObjective::Wholeseq => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = wholeseq_loss(model, &inst.hist, &inst.reference, weighting, scorer, &mut rng)?;
            return Ok(InstanceOut {
                loss: out.value.scalar,
                weight: out.gamma(),
                clamped: out.value.clamped,
                grad: out.grad,
                reward: Some(out.reward),
            });
        }
    };
    Ok(InstanceOut {
        loss: lg.value.scalar,
        weight: lg.value.weight_applied,
        clamped: lg.value.clamped,
        grad: lg.grad,
        reward: None,
    })
}

struct PhasePlan {
    objective: PhaseObjective,
    lr: f64,
    /// Indices into the instance list.
    members: Vec<usize>,
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    normalizer: Arc<dyn Normalizer>,
    scorer: Arc<dyn ScoringFunction>,
    instances: Vec<Instance>,
    dev: &'a [EvalGroup],
    history: Vec<EvalRecord>,
    updates: Vec<UpdateRecord>,
    best_params: Vec<f64>,
    best_step: usize,
    best_sum: f64,
    best_scores: ScoreBundle,
}

impl Trainer<'_> {
    fn evaluate(&mut self, model: &dyn Seq2seqModel, step: usize, phase: usize) -> Result<EvalRecord> {
        let e = evaluate_model(model, self.dev, self.normalizer.as_ref(), self.config.eval_beam)?;
        let rec = EvalRecord {
            step,
            phase,
            scores: e.scores,
            dev_ce: e.ce,
            dev_entropy: e.entropy,
        };
        log::info!(
            "phase {phase} step {step}: dev sum {:.2} ce {:.4} entropy {:.4}",
            e.scores.sum,
            e.ce,
            e.entropy
        );
        self.history.push(rec.clone());
        if e.scores.sum > self.best_sum {
            self.best_sum = e.scores.sum;
            self.best_step = step;
            self.best_scores = e.scores;
            self.best_params = model.params().to_vec();
        }
        Ok(rec)
    }

    fn run_phase(
        &mut self,
        model: &mut dyn Seq2seqModel,
        index: usize,
        plan: &PhasePlan,
        start_step: usize,
    ) -> Result<PhaseRecord> {
        let cfg = self.config;
        let batches_per_epoch = plan.members.len().div_ceil(cfg.batch_size);
        let mut opt = Adam::new(model.params().len(), plan.lr, batches_per_epoch * cfg.max_epochs);
        let mut step = start_step;
        let mut phase_best_sum = self.best_sum;
        let mut phase_best_step = self.best_step;
        let mut since_improve = 0usize;
        let mut stopped_early = false;
        let mut reward_total = 0.0;
        let mut reward_count = 0usize;
        let mut order = plan.members.clone();

        'epochs: for epoch in 0..cfg.max_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 1, index as u64, epoch as u64]));
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                step += 1;
                let snapshot: &dyn Seq2seqModel = &*model;
                let outs: Vec<InstanceOut> = batch
                    .par_iter()
                    .enumerate()
                    .map(|(pos, &i)| {
                        let seed = mix_seed(&[cfg.seed, 2, index as u64, step as u64, pos as u64]);
                        instance_update(
                            snapshot,
                            &self.instances[i],
                            plan.objective,
                            &cfg.weighting,
                            self.scorer.as_ref(),
                            seed,
                        )
                    })
                    .collect::<Result<_>>()?;
                let n = outs.len() as f64;
                let mut grad = vec![0.0; snapshot.params().len()];
                let mut loss = 0.0;
                for (pos, o) in outs.iter().enumerate() {
                    if !o.loss.is_finite() || o.grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::Divergence(format!(
                            "phase {index} step {step}: non-finite loss {} on training instance {}",
                            o.loss, batch[pos]
                        )));
                    }
                    loss += o.loss;
                    for (g, x) in grad.iter_mut().zip(&o.grad) {
                        *g += x;
                    }
                }
                grad.iter_mut().for_each(|g| *g /= n);
                let grad_norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
                let lr = opt.current_lr();
                opt.step(model.params_mut(), &grad);
                if model.params().iter().any(|p| !p.is_finite()) {
                    return Err(Error::Divergence(format!("phase {index} step {step}: non-finite parameters")));
                }
                let weights: Vec<f64> = outs.iter().map(|o| o.weight).collect();
                let rewards: Vec<f64> = outs.iter().filter_map(|o| o.reward).collect();
                reward_total += rewards.iter().sum::<f64>();
                reward_count += rewards.len();
                self.updates.push(UpdateRecord {
                    step,
                    phase: index,
                    objective: plan.objective,
                    batch_size: batch.len(),
                    loss: loss / n,
                    weight_mean: weights.iter().sum::<f64>() / n,
                    weight_min: weights.iter().copied().fold(f64::INFINITY, f64::min),
                    weight_max: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    clamped: outs.iter().filter(|o| o.clamped).count(),
                    grad_norm,
                    lr,
                    reward_mean: (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64),
                });
                if cfg.eval_every_steps > 0 && (step - start_step) % cfg.eval_every_steps == 0 {
                    if self.eval_and_track(&*model, step, index, &mut phase_best_sum, &mut phase_best_step, &mut since_improve)? {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
            let evaluated_now = cfg.eval_every_steps > 0 && (step - start_step) % cfg.eval_every_steps == 0;
            if cfg.eval_every_steps == 0 || (epoch + 1 == cfg.max_epochs && !evaluated_now) {
                if self.eval_and_track(&*model, step, index, &mut phase_best_sum, &mut phase_best_step, &mut since_improve)? {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
        Ok(PhaseRecord {
            index,
            objective: plan.objective,
            learning_rate: plan.lr,
            train_examples: plan.members.len(),
            start_step,
            end_step: step,
            best_step: phase_best_step,
            best_sum: phase_best_sum,
            stopped_early,
            mean_reward: (reward_count > 0).then(|| reward_total / reward_count as f64),
        })
    }

    /// Evaluates and updates plateau tracking; returns true when patience is
    /// exhausted.
    fn eval_and_track(
        &mut self,
        model: &dyn Seq2seqModel,
        step: usize,
        phase: usize,
        phase_best_sum: &mut f64,
        phase_best_step: &mut usize,
        since_improve: &mut usize,
    ) -> Result<bool> {
        let rec = self.evaluate(model, step, phase)?;
        if rec.scores.sum > *phase_best_sum {
            *phase_best_sum = rec.scores.sum;
            *phase_best_step = step;
            *since_improve = 0;
        } else {
            *since_improve += 1;
        }
        Ok(*since_improve >= self.config.patience)
    }
}

/// Trains `model` in place and leaves it at the parameters with the best
/// dev Sum. When `config.out_dir` is set the best checkpoint, the report and
/// the update log are written there.
pub fn train(
    config: &TrainConfig,
    train_examples: &[DialogueExample],
    dev_groups: &[EvalGroup],
    model: &mut dyn Seq2seqModel,
) -> Result<TrainReport> {
    config.validate()?;
    if train_examples.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if dev_groups.is_empty() {
        return Err(Error::Config(
            "dev split is empty, so dev Sum can never be computed for checkpoint selection".into(),
        ));
    }
    let strategy = config.weighting.strategy;
    let normalizer = default_normalizer(config.lang);
    let scorer = make_scoring_function(&config.weighting.scoring_fn.to_string(), normalizer.clone())?;
    let mut warnings = Vec::new();

    let all: Vec<usize> = (0..train_examples.len()).collect();
    let members = if strategy == Strategy::Prune {
        let report = corpus_report(train_examples, normalizer.as_ref())?;
        let keep = &config.weighting.prune_keep_buckets;
        let kept: Vec<usize> = report
            .per_example
            .iter()
            .filter(|e| keep.contains(&e.bucket))
            .map(|e| e.index)
            .collect();
        if kept.is_empty() {
            return Err(Error::Validation(format!("pruning to buckets {keep:?} leaves no training examples")));
        }
        kept
    } else {
        all
    };

    let finetune = match strategy {
        Strategy::Stepwise | Strategy::Combine | Strategy::Wholeseq => Some(match strategy {
            Strategy::Stepwise => PhaseObjective::Stepwise,
            _ => PhaseObjective::Wholeseq,
        }),
        _ => None,
    };
    let mut plans = Vec::new();
    match (strategy, finetune) {
        (Strategy::Combine, Some(obj)) => {
            plans.push(PhasePlan {
                objective: PhaseObjective::DataWeight,
                lr: config.learning_rate,
                members: members.clone(),
            });
            plans.push(PhasePlan {
                objective: obj,
                lr: config.finetune_lr(),
                members,
            });
        }
        (_, Some(obj)) => {
            if config.warm_started {
                plans.push(PhasePlan {
                    objective: obj,
                    lr: config.finetune_lr(),
                    members,
                });
            } else if config.allow_cold_start {
                warnings.push(format!(
                    "{strategy} started from an untrained model (cold start); model-based weighting expects a warm start"
                ));
                plans.push(PhasePlan {
                    objective: obj,
                    lr: config.finetune_lr(),
                    members,
                });
            } else {
                plans.push(PhasePlan {
                    objective: config.warmup_strategy.into(),
                    lr: config.learning_rate,
                    members: members.clone(),
                });
                plans.push(PhasePlan {
                    objective: obj,
                    lr: config.finetune_lr(),
                    members,
                });
            }
        }
        (Strategy::DataWeight, None) => plans.push(PhasePlan {
            objective: PhaseObjective::DataWeight,
            lr: config.learning_rate,
            members,
        }),
        _ => plans.push(PhasePlan {
            objective: PhaseObjective::Ce,
            lr: config.learning_rate,
            members,
        }),
    }

    let v = model.vocab();
    let instances = train_examples
        .iter()
        .map(|e| {
            let history = e.history();
            Instance {
                hist: v.encode_history(&history, model.max_input_len()),
                gold: v.encode_query(&e.gold_query, model.max_output_len()),
                reference: e.gold_query.clone(),
                degree: degree(&history, &e.gold_query, normalizer.as_ref()),
            }
        })
        .collect();

    let mut t = Trainer {
        config,
        normalizer,
        scorer,
        instances,
        dev: dev_groups,
        history: Vec::new(),
        updates: Vec::new(),
        best_params: model.params().to_vec(),
        best_step: 0,
        best_sum: f64::NEG_INFINITY,
        best_scores: ScoreBundle::default(),
    };
    t.evaluate(&*model, 0, 0)?;

    let mut phases = Vec::new();
    let mut start_step = 0;
    for (i, plan) in plans.iter().enumerate() {
        if i > 0 {
            model.params_mut().copy_from_slice(&t.best_params);
            start_step = t.best_step;
        }
        let rec = t.run_phase(model, i, plan, start_step)?;
        if plan.objective == PhaseObjective::Wholeseq {
            if let Some(r) = rec.mean_reward {
                if r < config.low_reward_threshold {
                    warnings.push(format!(
                        "mean wholeseq reward {r:.4} is below {}; the model likely needs a warm start",
                        config.low_reward_threshold
                    ));
                }
            }
        }
        phases.push(rec);
    }
    model.params_mut().copy_from_slice(&t.best_params);

    let mut report = TrainReport {
        strategy,
        seed: config.seed,
        phases,
        history: t.history,
        best_step: t.best_step,
        best_sum: t.best_sum,
        best_scores: t.best_scores,
        checkpoint: None,
        warnings,
        updates: t.updates,
    };
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &mut report, &*model)?;
    }
    Ok(report)
}

/// Writes the best checkpoint, the update log and the report into `dir`.
pub fn write_outputs(dir: &Path, report: &mut TrainReport, model: &dyn Seq2seqModel) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(&dir.join(CHECKPOINT_FILE))?;
    report.checkpoint = Some(CHECKPOINT_FILE.into());
    let log_path = dir.join(UPDATE_LOG_FILE);
    let mut buf = Vec::new();
    for u in &report.updates {
        serde_json::to_writer(&mut buf, u)?;
        buf.push(b'\n');
    }
    fs::write(&log_path, buf).map_err(|e| Error::io(&log_path, e))?;
    let report_path = dir.join(REPORT_FILE);
    let mut f = fs::File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    serde_json::to_writer_pretty(&mut f, &*report)?;
    f.write_all(b"\n").map_err(|e| Error::io(&report_path, e))?;
    Ok(())
}

pub fn load_update_log(path: &Path) -> Result<Vec<UpdateRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Convenience wrapper: builds a model for `train_examples`, groups the dev
/// examples and trains.
pub fn train_from_examples(
    config: &TrainConfig,
    train_examples: &[DialogueExample],
    dev_examples: &[DialogueExample],
) -> Result<(ReferenceModel, TrainReport)> {
    let mut model = build_model(config, train_examples)?;
    let groups = group_for_eval(dev_examples);
    let report = train(config, train_examples, &groups, &mut model)?;
    Ok((model, report))
}

/// Model config used by tests and the synthetic benchmarks.
pub fn small_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        embed_dim: 24,
        hidden_dim: 32,
        pos_dim: 8,
        max_input_len: 64,
        max_output_len: 8,
        seed,
        zero_output_init: false,
    }
}
