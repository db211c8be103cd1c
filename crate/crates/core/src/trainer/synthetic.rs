//! Seeded synthetic corpus with controllable over-association.
//!
//! Every dialogue belongs to a topic. The last user turn mentions
//! `last_turn_content` topic words and the faithful query picks
//! `query_len` of them in order. With probability `rho` a query is
//! corrupted: `r` of its tokens (uniform in `1..=query_len`) are replaced by
//! distractor words, which never occur in any history. The corrupted query
//! keeps its length, so its degree is `r / query_len`.
//!
//! A fully corrupted query is the topic's fixed headline sequence, a single
//! generic query that annotators reach for regardless of the dialogue. A
//! partially corrupted query takes its distractors at random from a larger
//! per-topic pool. The headline makes full corruption a strong mode of the
//! target distribution; the pool makes partial corruption raise its
//! entropy.
//!
//! Each example draws its content and its corruption from two separate
//! streams keyed by (seed, split, index). Changing only `rho` therefore
//! keeps every dialogue and every faithful query, and the corrupted sets
//! are nested as `rho` grows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::corpus::{DialogueExample, DialogueTurn, Speaker};
use crate::error::{Error, Result};
use crate::textnorm::{EnglishNormalizer, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    /// Corruption probability for training queries.
    pub train_rho: f64,
    /// Corruption probability for dev queries.
    pub dev_rho: f64,
    pub topics: usize,
    pub words_per_topic: usize,
    /// Size of the per-topic pool used for partial corruption.
    pub partial_distractors: usize,
    pub last_turn_content: usize,
    pub query_len: usize,
    /// Number of turns before the last user turn is drawn from `0..=max_prior_turns`.
    pub max_prior_turns: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_dev: 300,
            train_rho: 0.3,
            dev_rho: 0.3,
            topics: 6,
            words_per_topic: 12,
            partial_distractors: 8,
            last_turn_content: 5,
            query_len: 2,
            max_prior_turns: 2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_rho) || !(0.0..=1.0).contains(&self.dev_rho) {
            return Err(Error::Config("rho must be in [0, 1]".into()));
        }
        if self.query_len == 0 || self.query_len > self.last_turn_content {
            return Err(Error::Config("query_len must be in 1..=last_turn_content".into()));
        }
        if self.last_turn_content > self.words_per_topic {
            return Err(Error::Config("last_turn_content exceeds words_per_topic".into()));
        }
        if self.query_len > 1 && self.partial_distractors < self.query_len - 1 {
            return Err(Error::Config("partial_distractors must be >= query_len - 1".into()));
        }
        if self.topics == 0 || self.n_train == 0 || self.n_dev == 0 {
            return Err(Error::Config("topics, n_train and n_dev must be positive".into()));
        }
        Ok(())
    }
}

/// A generated pair with its ground-truth corruption count.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExample {
    pub example: DialogueExample,
    pub topic: usize,
    pub replaced: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<SyntheticExample>,
    pub dev: Vec<SyntheticExample>,
}

impl SyntheticCorpus {
    pub fn train_examples(&self) -> Vec<DialogueExample> {
        self.train.iter().map(|s| s.example.clone()).collect()
    }

    pub fn dev_examples(&self) -> Vec<DialogueExample> {
        self.dev.iter().map(|s| s.example.clone()).collect()
    }
}

struct Lexicon {
    topic_words: Vec<Vec<String>>,
    headlines: Vec<Vec<String>>,
    partial: Vec<Vec<String>>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aiou";

const OPENERS: &[&str] = &["i want to know about", "tell me about", "what about", "i like", "do you know"];
const JOINERS: &[&str] = &["and", "or", "with", "and the"];
const BOT_OPENERS: &[&str] = &["sure , we can talk about", "i think", "people often mention", "have you tried"];

/// Pseudo-words built from consonant-vowel syllables. Every word is checked
/// to survive English normalization unchanged.
fn lexicon(cfg: &SyntheticConfig) -> Lexicon {
    let norm = EnglishNormalizer::default();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x1e]));
    let needed = cfg.topics * (cfg.words_per_topic + cfg.query_len + cfg.partial_distractors);
    let mut words: Vec<String> = Vec::with_capacity(needed);
    while words.len() < needed {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.gen_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if words.contains(&w) || norm.normalize(&w).tokens != [w.clone()] {
            continue;
        }
        words.push(w);
    }
    let mut it = words.into_iter();
    let mut lex = Lexicon {
        topic_words: Vec::new(),
        headlines: Vec::new(),
        partial: Vec::new(),
    };
    for _ in 0..cfg.topics {
        lex.topic_words.push(it.by_ref().take(cfg.words_per_topic).collect());
        lex.headlines.push(it.by_ref().take(cfg.query_len).collect());
        lex.partial.push(it.by_ref().take(cfg.partial_distractors).collect());
    }
    lex
}

fn pick<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn sample(cfg: &SyntheticConfig, lex: &Lexicon, rho: f64, split: u64, index: usize) -> Result<SyntheticExample> {
    let rng = &mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, split, index as u64, 0]));
    let topic = rng.gen_range(0..cfg.topics);
    let words = &lex.topic_words[topic];
    let mut turns = Vec::new();
    let prior = rng.gen_range(0..=cfg.max_prior_turns);
    for i in 0..prior {
        let speaker = if (prior - i) % 2 == 1 { Speaker::Bot } else { Speaker::User };
        let a = words.choose(rng).expect("non-empty");
        let b = words.choose(rng).expect("non-empty");
        let opener = if speaker == Speaker::Bot { pick(rng, BOT_OPENERS) } else { pick(rng, OPENERS) };
        turns.push(DialogueTurn::new(speaker, format!("{opener} {a} {} {b}", pick(rng, JOINERS))));
    }
    let content: Vec<&String> = words.choose_multiple(rng, cfg.last_turn_content).collect();
    let mut last = pick(rng, OPENERS).to_string();
    for (i, w) in content.iter().enumerate() {
        if i > 0 && rng.gen_bool(0.5) {
            last.push(' ');
            last.push_str(pick(rng, JOINERS));
        }
        last.push(' ');
        last.push_str(w);
    }
    turns.push(DialogueTurn::new(Speaker::User, last));

    let mut positions: Vec<usize> = (0..cfg.last_turn_content).collect();
    positions.shuffle(rng);
    let mut chosen = positions[..cfg.query_len].to_vec();
    chosen.sort_unstable();
    let mut query: Vec<String> = chosen.iter().map(|&p| content[p].clone()).collect();

    let rng = &mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, split, index as u64, 1]));
    let u: f64 = rng.gen();
    let r = rng.gen_range(1..=cfg.query_len);
    let mut replaced = 0;
    if u < rho {
        replaced = r;
        if r == cfg.query_len {
            query = lex.headlines[topic].clone();
        } else {
            let mut slots: Vec<usize> = (0..cfg.query_len).collect();
            slots.shuffle(rng);
            let picks: Vec<&String> = lex.partial[topic].choose_multiple(rng, r).collect();
            for (&slot, w) in slots[..r].iter().zip(picks) {
                query[slot] = w.clone();
            }
        }
    }
    Ok(SyntheticExample {
        example: DialogueExample::new(turns, query.join(" "))?,
        topic,
        replaced,
    })
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let lex = lexicon(cfg);
    let train = (0..cfg.n_train)
        .map(|i| sample(cfg, &lex, cfg.train_rho, 0x7a, i))
        .collect::<Result<_>>()?;
    let dev = (0..cfg.n_dev)
        .map(|i| sample(cfg, &lex, cfg.dev_rho, 0xde, i))
        .collect::<Result<_>>()?;
    Ok(SyntheticCorpus { train, dev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overassoc::degree;

    #[test]
    fn degree_matches_replacement_count() {
        let cfg = SyntheticConfig {
            n_train: 400,
            n_dev: 50,
            ..SyntheticConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        let norm = EnglishNormalizer::default();
        for s in corpus.train.iter().chain(&corpus.dev) {
            let d = degree(&s.example.history(), &s.example.gold_query, &norm);
            assert_eq!(d, s.replaced as f64 / cfg.query_len as f64, "{:?}", s.example);
        }
        let noisy = corpus.train.iter().filter(|s| s.replaced > 0).count() as f64 / 400.0;
        assert!((noisy - 0.3).abs() < 0.07, "{noisy}");
    }

    #[test]
    fn noise_rate_only_changes_corrupted_queries() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig {
            train_rho: 0.6,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(a.dev, b.dev);
        assert_ne!(a.train, b.train);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.example.turns, y.example.turns);
            if x.replaced > 0 {
                assert_eq!(x.example.gold_query, y.example.gold_query);
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&SyntheticConfig::default()).unwrap(), generate(&SyntheticConfig::default()).unwrap());
    }

    #[test]
    fn zero_rho_is_clean() {
        let corpus = generate(&SyntheticConfig {
            train_rho: 0.0,
            dev_rho: 0.0,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert!(corpus.train.iter().chain(&corpus.dev).all(|s| s.replaced == 0));
    }
}
