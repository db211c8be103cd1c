//! Trains reference models on the synthetic over-association corpus and
//! prints the bucket-combination table, strategy comparison and entropy by
//! noise rate.
//!
//! cargo run --release --example synthetic_bench -- [seeds] [part]

use std::time::Instant;

use qpweight::corpus::group_for_eval;
use qpweight::losses::Strategy;
use qpweight::model::ReferenceModel;
use qpweight::overassoc::Bucket;
use qpweight::trainer::sweep::diagnostics_sweep;
use qpweight::trainer::synthetic::{generate, SyntheticConfig};
use qpweight::trainer::{small_model_config, train, vocab_for, TrainConfig};

fn config(seed: u64, strategy: Strategy) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.weighting.strategy = strategy;
    if strategy == Strategy::Combine {
        cfg.warmup_strategy = qpweight::trainer::WarmupStrategy::DataWeight;
    }
    cfg.learning_rate = 5e-3;
    cfg.finetune_learning_rate = Some(1e-3);
    cfg.batch_size = 32;
    cfg.max_epochs = 12;
    cfg.patience = 3;
    cfg.eval_beam = 4;
    cfg.seed = seed;
    cfg.model = small_model_config(seed);
    cfg
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let part = args.get(2).cloned().unwrap_or_else(|| "all".into());
    for seed in 0..seeds {
        let syn = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        if part == "all" || part == "a" {
            let t = Instant::now();
            let corpus = generate(&syn).unwrap();
            let table = diagnostics_sweep(
                &config(seed, Strategy::Ce),
                &corpus.train_examples(),
                &corpus.dev_examples(),
                &[vec![Bucket::Low, Bucket::Mid], Bucket::ALL.to_vec()],
            )
            .unwrap();
            for row in &table.rows {
                let s: Vec<String> = row
                    .subset_scores
                    .iter()
                    .map(|b| b.map(|b| format!("{:.2}", b.sum)).unwrap_or("-".into()))
                    .collect();
                println!(
                    "A seed {seed} combo {:?} n {} subsets {:?} entropy {:.4} step {}",
                    row.combo, row.train_examples, s, row.dev_entropy, row.best_step
                );
            }
            println!("A seed {seed} took {:?}", t.elapsed());
        }
        if part == "all" || part == "b" {
            let corpus = generate(&syn).unwrap();
            let train_ex = corpus.train_examples();
            let groups = group_for_eval(&corpus.dev_examples());
            for strategy in [Strategy::Ce, Strategy::DataWeight, Strategy::Wholeseq, Strategy::Combine] {
                let t = Instant::now();
                let cfg = config(seed, strategy);
                let mut model = ReferenceModel::new(vocab_for(&train_ex, 1), cfg.model.clone()).unwrap();
                let r = train(&cfg, &train_ex, &groups, &mut model).unwrap();
                println!(
                    "B seed {seed} {strategy} best {:.3} step {} phases {:?} warnings {:?} took {:?}",
                    r.best_sum,
                    r.best_step,
                    r.phases.iter().map(|p| (p.best_sum, p.end_step, p.mean_reward)).collect::<Vec<_>>(),
                    r.warnings,
                    t.elapsed()
                );
            }
        }
        if part == "all" || part == "e" {
            for rho in [0.0, 0.3, 0.6] {
                let t = Instant::now();
                let corpus = generate(&SyntheticConfig {
                    train_rho: rho,
                    ..syn.clone()
                })
                .unwrap();
                let train_ex = corpus.train_examples();
                let groups = group_for_eval(&corpus.dev_examples());
                let mut cfg = config(seed, Strategy::Ce);
                cfg.patience = cfg.max_epochs;
                let mut model = ReferenceModel::new(vocab_for(&train_ex, 1), cfg.model.clone()).unwrap();
                let r = train(&cfg, &train_ex, &groups, &mut model).unwrap();
                let last = r.history.last().unwrap();
                println!(
                    "E seed {seed} rho {rho} final entropy {:.4} final ce {:.4} best {:.2} took {:?}",
                    last.dev_entropy,
                    last.dev_ce,
                    r.best_sum,
                    t.elapsed()
                );
            }
        }
    }
}
