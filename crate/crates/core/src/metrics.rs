//! Evaluation metrics and reward scoring functions.
//!
//! Unigram F1 works on normalized tokens (stop words removed, lemmatized).
//! BLEU and ROUGE work on surface tokens from [`tokenize`]. All reported
//! scores are on a 0-100 scale; scoring functions return [0, 1].

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalGroup;
use crate::error::{Error, Result};
use crate::textnorm::{tokenize, Normalizer};

fn counts<T: Hash + Eq + Clone>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

/// Clipped multiset overlap F1 in [0, 1]. Two empty sides score 1, one
/// empty side scores 0.
fn overlap_f1<T: Hash + Eq + Clone>(pred: &[T], reference: &[T]) -> f64 {
    match (pred.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let rc = counts(reference.iter().cloned());
    let overlap: usize = counts(pred.iter().cloned())
        .iter()
        .map(|(t, &c)| c.min(rc.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn f1_from_counts(overlap: usize, pred_len: usize, ref_len: usize) -> f64 {
    match (pred_len == 0, ref_len == 0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ if overlap == 0 => 0.0,
        _ => {
            let p = overlap as f64 / pred_len as f64;
            let r = overlap as f64 / ref_len as f64;
            2.0 * p * r / (p + r)
        }
    }
}

pub fn unigram_f1(prediction: &str, reference: &str, normalizer: &dyn Normalizer) -> f64 {
    overlap_f1(
        &normalizer.normalize(prediction).tokens,
        &normalizer.normalize(reference).tokens,
    )
}

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).collect()
}

/// Sufficient statistics for corpus BLEU. Summing two of these is the same
/// as scoring the concatenated corpora.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub pred_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.pred_len += other.pred_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU on a 0-100 scale.
    pub fn score(&self, max_n: usize) -> f64 {
        assert!((1..=4).contains(&max_n), "max_n must be in 1..=4");
        if self.pred_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..max_n {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = if self.pred_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.pred_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / max_n as f64).exp()
    }
}

/// Clipped n-gram statistics of one prediction against its references.
/// The effective reference length is the one closest to the prediction
/// length, shorter on ties.
pub fn bleu_stats(pred: &[String], references: &[Vec<String>]) -> BleuStats {
    let mut stats = BleuStats {
        pred_len: pred.len(),
        ..Default::default()
    };
    for n in 1..=4 {
        let pc = counts(ngrams(pred, n));
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in counts(ngrams(r, n)) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.totals[n - 1] = pred.len().saturating_sub(n - 1);
        stats.matches[n - 1] = pc
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
    }
    stats.ref_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(pred.len()), r))
        .unwrap_or(0);
    stats
}

/// Sentence BLEU-`max_n` (0-100) of `prediction` against `references`.
pub fn bleu(prediction: &str, references: &[&str], max_n: usize) -> f64 {
    let pred = tokenize(prediction);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    bleu_stats(&pred, &refs).score(max_n)
}

/// Sentence BLEU-2 in [0, 1] with add-one smoothing on the bigram
/// precision.
pub fn smoothed_bleu2(prediction: &str, reference: &str) -> f64 {
    let pred = tokenize(prediction);
    let reference = tokenize(reference);
    let s = bleu_stats(&pred, std::slice::from_ref(&reference));
    if s.pred_len == 0 || s.matches[0] == 0 {
        return 0.0;
    }
    let p1 = s.matches[0] as f64 / s.totals[0] as f64;
    let p2 = (s.matches[1] as f64 + 1.0) / (s.totals[1] as f64 + 1.0);
    let bp = if s.pred_len < s.ref_len {
        (1.0 - s.ref_len as f64 / s.pred_len as f64).exp()
    } else {
        1.0
    };
    bp * (p1 * p2).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_tokens(pred: &[String], reference: &[String], variant: RougeVariant) -> f64 {
    let f1 = match variant {
        RougeVariant::One => overlap_f1(pred, reference),
        RougeVariant::Two => overlap_f1(&ngrams(pred, 2), &ngrams(reference, 2)),
        RougeVariant::L => f1_from_counts(lcs_len(pred, reference), pred.len(), reference.len()),
    };
    100.0 * f1
}

/// ROUGE F-measure (0-100).
pub fn rouge(prediction: &str, reference: &str, variant: RougeVariant) -> f64 {
    rouge_tokens(&tokenize(prediction), &tokenize(reference), variant)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub uni_f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    /// uni_f1 + bleu1 + bleu2.
    pub sum: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl ScoreBundle {
    fn new(uni_f1: f64, bleu1: f64, bleu2: f64, rouge: [f64; 3]) -> Self {
        Self {
            uni_f1,
            bleu1,
            bleu2,
            sum: uni_f1 + bleu1 + bleu2,
            rouge1: rouge[0],
            rouge2: rouge[1],
            rouge_l: rouge[2],
        }
    }
}

struct GroupScore {
    uni_f1: f64,
    rouge: [f64; 3],
    bleu: BleuStats,
}

fn score_group(pred: &str, references: &[String], normalizer: &dyn Normalizer) -> GroupScore {
    let pred_norm = normalizer.normalize(pred).tokens;
    let pred_tok = tokenize(pred);
    let refs_tok: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let uni_f1 = references
        .iter()
        .map(|r| overlap_f1(&pred_norm, &normalizer.normalize(r).tokens))
        .fold(0.0, f64::max);
    let mut rouge = [0.0; 3];
    for (slot, v) in [RougeVariant::One, RougeVariant::Two, RougeVariant::L].into_iter().enumerate() {
        rouge[slot] = refs_tok
            .iter()
            .map(|r| rouge_tokens(&pred_tok, r, v))
            .fold(0.0, f64::max);
    }
    GroupScore {
        uni_f1,
        rouge,
        bleu: bleu_stats(&pred_tok, &refs_tok),
    }
}

/// Multi-reference split evaluation: max-over-references F1 and ROUGE
/// averaged over groups, corpus-level BLEU.
pub fn evaluate_split(
    predictions: &HashMap<String, String>,
    groups: &[EvalGroup],
    normalizer: &dyn Normalizer,
) -> Result<ScoreBundle> {
    if groups.is_empty() {
        return Err(Error::Validation("no evaluation groups".into()));
    }
    let missing: Vec<&str> = groups
        .iter()
        .filter(|g| !predictions.contains_key(&g.context_id))
        .map(|g| g.context_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "missing predictions for context_ids: {}",
            missing.join(", ")
        )));
    }
    let scores: Vec<GroupScore> = groups
        .par_iter()
        .map(|g| score_group(&predictions[&g.context_id], &g.references, normalizer))
        .collect();
    Ok(aggregate(&scores))
}

/// Single-reference scoring of aligned (prediction, reference) pairs.
pub fn evaluate_pairs(pairs: &[(String, String)], normalizer: &dyn Normalizer) -> Result<ScoreBundle> {
    if pairs.is_empty() {
        return Err(Error::Validation("no prediction/reference pairs".into()));
    }
    let scores: Vec<GroupScore> = pairs
        .par_iter()
        .map(|(p, r)| score_group(p, std::slice::from_ref(r), normalizer))
        .collect();
    Ok(aggregate(&scores))
}

/// Per-pair bundle (sentence-level BLEU).
pub fn pair_scores(prediction: &str, reference: &str, normalizer: &dyn Normalizer) -> ScoreBundle {
    aggregate(&[score_group(prediction, &[reference.to_string()], normalizer)])
}

fn aggregate(scores: &[GroupScore]) -> ScoreBundle {
    let n = scores.len() as f64;
    let mut bleu = BleuStats::default();
    let mut uni = 0.0;
    let mut rouge = [0.0; 3];
    for s in scores {
        bleu.add(&s.bleu);
        uni += s.uni_f1;
        for k in 0..3 {
            rouge[k] += s.rouge[k];
        }
    }
    ScoreBundle::new(
        100.0 * uni / n,
        bleu.score(1),
        bleu.score(2),
        rouge.map(|r| r / n),
    )
}

/// Candidate-vs-reference quality score in [0, 1] used as a reward.
pub trait ScoringFunction: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringName {
    UniF1,
    Bleu2,
}

impl fmt::Display for ScoringName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringName::UniF1 => "uni_f1",
            ScoringName::Bleu2 => "bleu2",
        })
    }
}

impl FromStr for ScoringName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni_f1" => Ok(ScoringName::UniF1),
            "bleu2" => Ok(ScoringName::Bleu2),
            "sbert" => Err(Error::Config(
                "scoring function \"sbert\" needs an embedding model; implement ScoringFunction to plug one in".into(),
            )),
            other => Err(Error::Config(format!(
                "unknown scoring function {other:?} (expected uni_f1 or bleu2)"
            ))),
        }
    }
}

struct UniF1Scorer {
    normalizer: Arc<dyn Normalizer>,
}

impl ScoringFunction for UniF1Scorer {
    fn name(&self) -> &str {
        "uni_f1"
    }

    fn score(&self, candidate: &str, reference: &str) -> f64 {
        unigram_f1(candidate, reference, self.normalizer.as_ref())
    }
}

struct Bleu2Scorer;

impl ScoringFunction for Bleu2Scorer {
    fn name(&self) -> &str {
        "bleu2"
    }

    fn score(&self, candidate: &str, reference: &str) -> f64 {
        smoothed_bleu2(candidate, reference)
    }
}

pub fn make_scoring_function(
    name: &str,
    normalizer: Arc<dyn Normalizer>,
) -> Result<Arc<dyn ScoringFunction>> {
    Ok(match name.parse::<ScoringName>()? {
        ScoringName::UniF1 => Arc::new(UniF1Scorer { normalizer }),
        ScoringName::Bleu2 => Arc::new(Bleu2Scorer),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::{default_normalizer, EnglishNormalizer, Language};
    use proptest::prelude::*;

    fn en() -> EnglishNormalizer {
        EnglishNormalizer::default()
    }

    #[test]
    fn unigram_f1_cases() {
        let n = en();
        assert_eq!(unigram_f1("grip strength", "grip strength", &n), 1.0);
        assert_eq!(unigram_f1("apple pie", "coffee brew", &n), 0.0);
        assert!((unigram_f1("apple pear plum", "apple pear fig", &n) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(unigram_f1("", "", &n), 1.0);
        assert_eq!(unigram_f1("", "apple", &n), 0.0);
        assert_eq!(unigram_f1("the of", "apple", &n), 0.0);
    }

    #[test]
    fn unigram_f1_clips_counts() {
        // pred [apple, apple], ref [apple]: overlap 1, P = 1/2, R = 1
        let f = unigram_f1("apple apple", "apple", &en());
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_cases() {
        assert!((bleu("a b c d", &["a b c d"], 2) - 100.0).abs() < 1e-9);
        assert_eq!(bleu("x y", &["a b"], 1), 0.0);
        assert_eq!(bleu("", &["a b"], 1), 0.0);
        let b2 = bleu("a b c d", &["a b c e"], 2);
        assert!((b2 - 100.0 * 0.5f64.sqrt()).abs() < 1e-9);
        assert!((b2 - 70.71).abs() < 0.01);
    }

    #[test]
    fn bleu_brevity_penalty_and_closest_reference() {
        // c = 2, refs of length 4 and 5: r = 4, BP = exp(1 - 2)
        let b = bleu("a b", &["a b c d", "a b c d e"], 1);
        assert!((b - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
        // tie between lengths 1 and 3 for c = 2 picks the shorter, so BP = 1
        let b = bleu("a b", &["a", "a b c"], 1);
        assert!((b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_multi_reference_clipping() {
        // "a a" vs refs "a b", "a a": max count of "a" is 2
        assert!((bleu("a a", &["a b", "a a"], 1) - 100.0).abs() < 1e-9);
        assert!((bleu("a a", &["a b"], 1) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_asymmetric() {
        // "a b" vs "a b c": P1 = 1, BP = exp(1 - 3/2); reverse: P1 = 2/3, BP = 1
        let fwd = bleu("a b", &["a b c"], 1);
        let rev = bleu("a b c", &["a b"], 1);
        assert!((fwd - 100.0 * (-0.5f64).exp()).abs() < 1e-9);
        assert!((rev - 200.0 / 3.0).abs() < 1e-9);
        assert!((fwd - rev).abs() > 1.0);
    }

    #[test]
    fn rouge_cases() {
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            assert!((rouge("a b c", "a b c", v) - 100.0).abs() < 1e-9);
        }
        assert_eq!(rouge("a b c", "b a", RougeVariant::Two), 0.0);
        assert!((rouge("a b c", "a c", RougeVariant::L) - 80.0).abs() < 1e-9);
        assert_eq!(rouge("", "", RougeVariant::L), 100.0);
        assert_eq!(rouge("", "a", RougeVariant::One), 0.0);
    }

    #[test]
    fn smoothed_bleu2_cases() {
        assert_eq!(smoothed_bleu2("apple pie", "apple pie"), 1.0);
        assert_eq!(smoothed_bleu2("apple pie", "coffee brew"), 0.0);
        // single token, no bigrams: p2 = 1/1
        assert_eq!(smoothed_bleu2("apple", "apple"), 1.0);
        // "a b c" vs "a c b": p1 = 1, p2 = (0 + 1) / (2 + 1)
        assert!((smoothed_bleu2("a b c", "a c b") - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scoring_functions() {
        let n = default_normalizer(Language::En);
        let f = make_scoring_function("uni_f1", n.clone()).unwrap();
        assert_eq!(f.score("grip strength", "grip strength"), 1.0);
        assert!((f.score("apple pear plum", "apple pear fig") - 2.0 / 3.0).abs() < 1e-12);
        let b = make_scoring_function("bleu2", n.clone()).unwrap();
        assert_eq!(b.score("x y", "a b"), 0.0);
        assert_eq!(b.name(), "bleu2");
        assert!(matches!(make_scoring_function("rouge", n.clone()), Err(Error::Config(_))));
        assert!(matches!(make_scoring_function("sbert", n), Err(Error::Config(_))));
    }

    #[test]
    fn bleu_stats_add_matches_corpus() {
        let p1 = tokenize("a b c");
        let p2 = tokenize("d e");
        let r1 = vec![tokenize("a b d")];
        let r2 = vec![tokenize("d e f")];
        let mut s = bleu_stats(&p1, &r1);
        s.add(&bleu_stats(&p2, &r2));
        // unigrams 4/5, bigrams 2/3, c = 5, r = 6
        let expected = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * ((4.0 / 5.0) * (2.0 / 3.0f64)).sqrt();
        assert!((s.score(2) - expected).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_f1_symmetric(
            a in proptest::collection::vec("[a-e]", 0..8),
            b in proptest::collection::vec("[a-e]", 0..8),
        ) {
            let (a, b) = (a.join(" "), b.join(" "));
            let n = en();
            for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
                let r = rouge(&a, &b, v);
                prop_assert!((0.0..=100.0 + 1e-9).contains(&r));
                prop_assert!((r - rouge(&b, &a, v)).abs() < 1e-9);
            }
            let f = unigram_f1(&a, &b, &n);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((f - unigram_f1(&b, &a, &n)).abs() < 1e-12);
            for max_n in [1, 2] {
                let s = bleu(&a, &[b.as_str()], max_n);
                prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
            }
            let s = smoothed_bleu2(&a, &b);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
