//! Command-line front end: `analyze`, `train`, `evaluate`, `predict`, `sweep`.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration
//! (including unknown flags), 2 for runtime failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::corpus::{group_for_eval, load_corpus, load_predictions, write_predictions, Split};
use crate::error::{Error, Result};
use crate::losses::{Profile, Strategy};
use crate::metrics::{evaluate_pairs, evaluate_split, ScoreBundle};
use crate::model::load_checkpoint;
use crate::overassoc::{corpus_report, parse_buckets, Bucket};
use crate::textnorm::{default_normalizer, Language};
use crate::trainer::config::{read_entries, ConfigEntries, ConfigEntry};
use crate::trainer::sweep::{degree_sum_correlation, diagnostics_sweep, grid_sweep, GridSpec};
use crate::trainer::{build_model, predict, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "qpweight", version, about = "Over-association analysis and weighted training for query producers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Over-association degree report for a corpus.
    Analyze(AnalyzeArgs),
    /// Train a reference model.
    Train(TrainArgs),
    /// Score a prediction file against a reference corpus.
    Evaluate(EvaluateArgs),
    /// Decode one query per dialogue context with a checkpoint.
    Predict(PredictArgs),
    /// Train one model per bucket combination or hyperparameter setting.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "en")]
    lang: Language,
    /// Also correlate degree with per-example Sum of this checkpoint's
    /// predictions (single reference per example).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Training settings shared by `train` and `sweep`. Flags override the
/// config file.
#[derive(Debug, Args)]
struct TrainSettings {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lang: Option<Language>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    settings: TrainSettings,
    /// Output directory for the checkpoint, report and update log.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ReferenceMode {
    /// One group per dialogue context, all its gold queries as references.
    Multi,
    /// Every (context, query) pair scored on its own.
    Single,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "en")]
    lang: Language,
    /// Comma-separated subset of uni_f1, bleu, rouge.
    #[arg(long, default_value = "uni_f1,bleu,rouge")]
    metrics: String,
    #[arg(long, value_enum, default_value = "multi")]
    reference_mode: ReferenceMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    settings: TrainSettings,
    /// Bucket combinations separated by ';', e.g. "1;1,2;1,3;1,2,3".
    #[arg(long)]
    combos: Option<String>,
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    kappas: Vec<usize>,
    /// Output directory for per-run artifacts and the sweep table.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let examples = load_corpus(&a.corpus, Split::Train)?;
    let normalizer = default_normalizer(a.lang);
    let mut report = corpus_report(&examples, normalizer.as_ref())?;
    if let Some(path) = &a.model {
        let model = load_checkpoint(path)?;
        report.degree_sum_pearson = Some(degree_sum_correlation(&model, &examples, normalizer.as_ref(), a.beam)?);
    }
    emit(&report, a.out.as_deref())
}

fn flag_entry(entries: &mut ConfigEntries, key: &str, flag: &str, value: String) {
    entries.insert(
        key.into(),
        ConfigEntry {
            value,
            origin: format!("--{flag}"),
        },
    );
}

fn resolve_config(s: &TrainSettings) -> Result<TrainConfig> {
    let mut entries = match &s.config {
        Some(path) => read_entries(path)?,
        None => ConfigEntries::new(),
    };
    for raw in &s.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {raw:?}")))?;
        let k = k.trim();
        if !crate::trainer::config::KEYS.contains(&k) {
            return Err(Error::Config(format!("--set: unknown key {k:?}")));
        }
        flag_entry(&mut entries, k, "set", v.trim().to_string());
    }
    let paths = [("train", &s.train), ("dev", &s.dev), ("init_checkpoint", &s.init_checkpoint)];
    for (key, value) in paths {
        if let Some(p) = value {
            flag_entry(&mut entries, key, &key.replace('_', "-"), p.display().to_string());
        }
    }
    if let Some(v) = s.strategy {
        flag_entry(&mut entries, "strategy", "strategy", v.to_string());
    }
    if let Some(v) = s.profile {
        flag_entry(&mut entries, "profile", "profile", format!("{v:?}").to_lowercase());
    }
    if let Some(v) = s.seed {
        flag_entry(&mut entries, "seed", "seed", v.to_string());
    }
    if let Some(v) = s.lang {
        flag_entry(&mut entries, "lang", "lang", v.to_string());
    }
    let cfg = TrainConfig::from_entries(&entries)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_splits(cfg: &TrainConfig) -> Result<(Vec<crate::corpus::DialogueExample>, Vec<crate::corpus::DialogueExample>)> {
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("no training corpus: pass --train or set train in the config".into()))?;
    let dev_path = cfg
        .dev_path
        .as_ref()
        .ok_or_else(|| Error::Config("no dev corpus: pass --dev or set dev in the config".into()))?;
    Ok((load_corpus(train_path, Split::Train)?, load_corpus(dev_path, Split::Dev)?))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.settings)?;
    if let Some(out) = a.out {
        cfg.out_dir = Some(out);
    }
    let (train_ex, dev_ex) = load_splits(&cfg)?;
    if cfg.init_checkpoint.is_some() && cfg.weighting.strategy.is_model_based() {
        cfg.warm_started = true;
    }
    let mut model = build_model(&cfg, &train_ex)?;
    let groups = group_for_eval(&dev_ex);
    let report = train(&cfg, &train_ex, &groups, &mut model)?;
    if cfg.out_dir.is_none() {
        emit(&report, None)?;
    }
    Ok(())
}

const METRIC_KEYS: &[(&str, &[&str])] = &[
    ("uni_f1", &["uni_f1"]),
    ("bleu", &["bleu1", "bleu2"]),
    ("rouge", &["rouge1", "rouge2", "rougeL"]),
];

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut keep: Vec<&str> = Vec::new();
    for m in a.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let (_, fields) = METRIC_KEYS
            .iter()
            .find(|(name, _)| *name == m)
            .ok_or_else(|| Error::Config(format!("--metrics: unknown metric {m:?} (expected uni_f1, bleu, rouge)")))?;
        keep.extend(fields.iter());
    }
    if keep.is_empty() {
        return Err(Error::Config("--metrics selects nothing".into()));
    }
    let preds = load_predictions(&a.pred)?;
    let refs = load_corpus(&a.reference, Split::Dev)?;
    let normalizer = default_normalizer(a.lang);
    let (scores, units, mode) = match a.reference_mode {
        ReferenceMode::Multi => {
            let groups = group_for_eval(&refs);
            (evaluate_split(&preds, &groups, normalizer.as_ref())?, groups.len(), "multi")
        }
        ReferenceMode::Single => {
            let mut pairs = Vec::with_capacity(refs.len());
            for ex in &refs {
                let p = preds.get(&ex.context_id).ok_or_else(|| {
                    Error::Validation(format!("missing prediction for context_id {}", ex.context_id))
                })?;
                pairs.push((p.clone(), ex.gold_query.clone()));
            }
            (evaluate_pairs(&pairs, normalizer.as_ref())?, pairs.len(), "single")
        }
    };
    emit(&evaluation_json(&scores, &keep, mode, units)?, a.out.as_deref())
}

/// Score bundle restricted to the selected metrics, labelled with the
/// reference mode. `sum` is present only when all its parts are.
fn evaluation_json(scores: &ScoreBundle, keep: &[&str], mode: &str, units: usize) -> Result<Value> {
    let Value::Object(all) = serde_json::to_value(scores)? else {
        unreachable!("score bundle serializes to an object")
    };
    let mut out = Map::new();
    out.insert("reference_mode".into(), Value::from(mode));
    out.insert("units".into(), Value::from(units));
    let with_sum = ["uni_f1", "bleu1", "bleu2"].iter().all(|k| keep.contains(k));
    for (k, v) in all {
        if keep.contains(&k.as_str()) || (k == "sum" && with_sum) {
            out.insert(k, v);
        }
    }
    Ok(Value::Object(out))
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let examples = load_corpus(&a.input, Split::Test)?;
    let groups = group_for_eval(&examples);
    let preds = predict(&model, &groups, a.beam)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_predictions(&a.out, &preds)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.settings)?;
    cfg.out_dir = a.out.clone();
    let (train_ex, dev_ex) = load_splits(&cfg)?;
    let grid_given = !(a.alphas.is_empty() && a.betas.is_empty() && a.kappas.is_empty());
    let value = match (&a.combos, grid_given) {
        (Some(_), true) => return Err(Error::Config("--combos and grid flags are mutually exclusive".into())),
        (None, false) => return Err(Error::Config("sweep needs --combos or at least one of --alphas/--betas/--kappas".into())),
        (Some(spec), false) => {
            let combos = spec
                .split(';')
                .map(|c| parse_buckets(c.trim()))
                .collect::<Result<Vec<Vec<Bucket>>>>()
                .map_err(|e| Error::Config(format!("--combos: {e}")))?;
            serde_json::to_value(diagnostics_sweep(&cfg, &train_ex, &dev_ex, &combos)?)?
        }
        (None, true) => {
            let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
            let grid = GridSpec {
                alphas: or(&a.alphas, cfg.weighting.alpha),
                betas: or(&a.betas, cfg.weighting.beta),
                kappas: if a.kappas.is_empty() { vec![cfg.weighting.kappa] } else { a.kappas.clone() },
            };
            serde_json::to_value(grid_sweep(&cfg, &train_ex, &dev_ex, &grid)?)?
        }
    };
    emit(&value, a.out.as_ref().map(|d| d.join("sweep.json")).as_deref())
}
