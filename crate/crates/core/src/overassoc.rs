//! Over-association degree of a gold query against its dialogue history,
//! degree buckets, and corpus-level reports.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DialogueExample;
use crate::error::{Error, Result};
use crate::textnorm::Normalizer;

/// Number of fixed-width histogram bins over [0, 1].
pub const HISTOGRAM_BINS: usize = 10;

/// Fraction of normalized query tokens absent from the normalized history.
///
/// Containment is a set lookup over history lemmas; each query token
/// (duplicates included) counts once in numerator and denominator. An
/// all-stop-word query has degree 0.
pub fn degree(history: &str, query: &str, normalizer: &dyn Normalizer) -> f64 {
    let q = normalizer.normalize(query);
    if q.is_empty() {
        return 0.0;
    }
    let h: HashSet<String> = normalizer.normalize(history).tokens.into_iter().collect();
    let contained = q.tokens.iter().filter(|t| h.contains(*t)).count();
    1.0 - contained as f64 / q.len() as f64
}

/// Degree bucket: 1 for d <= 1/3, 2 for 1/3 < d <= 2/3, 3 above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Bucket {
    Low = 1,
    Mid = 2,
    High = 3,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Low, Bucket::Mid, Bucket::High];

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl From<Bucket> for u8 {
    fn from(b: Bucket) -> u8 {
        b as u8
    }
}

impl TryFrom<u8> for Bucket {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Bucket::Low),
            2 => Ok(Bucket::Mid),
            3 => Ok(Bucket::High),
            other => Err(Error::Validation(format!("bucket must be 1, 2 or 3, got {other}"))),
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

pub fn bucket(d: f64) -> Result<Bucket> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::Validation(format!("degree {d} outside [0, 1]")));
    }
    Ok(if d <= 1.0 / 3.0 {
        Bucket::Low
    } else if d <= 2.0 / 3.0 {
        Bucket::Mid
    } else {
        Bucket::High
    })
}

/// Parses a bucket set such as `"1,2"`.
pub fn parse_buckets(s: &str) -> Result<Vec<Bucket>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: u8 = part
            .parse()
            .map_err(|_| Error::Config(format!("invalid bucket {part:?}")))?;
        let b = Bucket::try_from(v).map_err(|e| Error::Config(e.to_string()))?;
        if !out.contains(&b) {
            out.push(b);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty bucket set".into()));
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDegree {
    pub index: usize,
    pub context_id: String,
    pub degree: f64,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub bucket_shares: [f64; 3],
    pub histogram: Histogram,
    pub per_example: Vec<ExampleDegree>,
    /// Correlation between degree and per-example Sum. of a model's
    /// predictions, filled in only when a model is supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree_sum_pearson: Option<f64>,
}

impl DegreeReport {
    pub fn bucket_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for e in &self.per_example {
            counts[e.bucket.index()] += 1;
        }
        counts
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.per_example.iter().map(|e| e.degree).collect()
    }
}

pub fn corpus_report(examples: &[DialogueExample], normalizer: &dyn Normalizer) -> Result<DegreeReport> {
    if examples.is_empty() {
        return Err(Error::Validation("cannot report on an empty corpus".into()));
    }
    let per_example = examples
        .par_iter()
        .enumerate()
        .map(|(index, ex)| {
            let d = degree(&ex.history(), &ex.gold_query, normalizer);
            Ok(ExampleDegree {
                index,
                context_id: ex.context_id.clone(),
                degree: d,
                bucket: bucket(d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_degrees(per_example))
}

pub(crate) fn report_from_degrees(per_example: Vec<ExampleDegree>) -> DegreeReport {
    let n = per_example.len() as f64;
    let mut bucket_counts = [0usize; 3];
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for e in &per_example {
        bucket_counts[e.bucket.index()] += 1;
        let bin = ((e.degree * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    DegreeReport {
        bucket_shares: bucket_counts.map(|c| c as f64 / n),
        histogram: Histogram {
            bin_width: 1.0 / HISTOGRAM_BINS as f64,
            counts,
        },
        per_example,
        degree_sum_pearson: None,
    }
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueTurn, Speaker};
    use crate::textnorm::EnglishNormalizer;
    use proptest::prelude::*;

    fn en() -> EnglishNormalizer {
        EnglishNormalizer::default()
    }

    #[test]
    fn degree_extremes() {
        let n = en();
        assert_eq!(degree("grip strength study", "grip strength", &n), 0.0);
        assert_eq!(degree("hello there", "coffee brew", &n), 1.0);
        assert_eq!(degree("anything", "the of", &n), 0.0);
    }

    #[test]
    fn degree_one_third() {
        let n = en();
        let d = degree("my grip strength is weak", "lancet grip strength", &n);
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_query_tokens_count_separately() {
        // [coffee, coffee, brew], only brew in history
        let d = degree("brew", "coffee coffee brew", &en());
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket(1.0 / 3.0).unwrap(), Bucket::Low);
        assert_eq!(bucket(0.5).unwrap(), Bucket::Mid);
        assert_eq!(bucket(0.9).unwrap(), Bucket::High);
        assert!(bucket(1.1).is_err());
        assert!(bucket(-0.1).is_err());
        assert!(bucket(f64::NAN).is_err());
    }

    #[test]
    fn bucket_serde_as_number() {
        assert_eq!(serde_json::to_string(&Bucket::Mid).unwrap(), "2");
        assert!(serde_json::from_str::<Bucket>("4").is_err());
    }

    #[test]
    fn parse_bucket_sets() {
        assert_eq!(parse_buckets("2,1,2").unwrap(), vec![Bucket::Low, Bucket::Mid]);
        assert!(parse_buckets("").is_err());
        assert!(parse_buckets("0").is_err());
    }

    fn ex(history: &str, q: &str) -> DialogueExample {
        DialogueExample::new(vec![DialogueTurn::new(Speaker::User, history)], q).unwrap()
    }

    #[test]
    fn report_shares() {
        // degrees 0, 0, 0.5, 1
        let corpus = [
            ex("apple pie", "apple"),
            ex("pear tart", "pear tart"),
            ex("plum jam", "plum cake"),
            ex("fig roll", "coffee"),
        ];
        let r = corpus_report(&corpus, &en()).unwrap();
        assert_eq!(r.bucket_shares, [0.5, 0.25, 0.25]);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 4);
        assert_eq!(r.histogram.counts[0], 2);
        assert_eq!(r.histogram.counts[5], 1);
        assert_eq!(r.histogram.counts[9], 1);

        let clean = [ex("apple", "apple"), ex("pear", "pear")];
        assert_eq!(corpus_report(&clean, &en()).unwrap().bucket_shares, [1.0, 0.0, 0.0]);
        assert!(corpus_report(&[], &en()).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    const WORDS: &[&str] = &["apple", "grip", "brew", "coffee", "lancet", "study", "pear", "tart"];

    fn words(idx: &[usize]) -> String {
        idx.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn duplicating_history_turns_is_invariant(
            h in proptest::collection::vec(0..WORDS.len(), 1..8),
            q in proptest::collection::vec(0..WORDS.len(), 1..5),
        ) {
            let n = en();
            let (hs, qs) = (words(&h), words(&q));
            let doubled = format!("{hs} <sep> {hs}");
            prop_assert_eq!(degree(&hs, &qs, &n), degree(&doubled, &qs, &n));
        }

        #[test]
        fn appending_query_zeroes_degree(
            h in proptest::collection::vec(0..WORDS.len(), 1..8),
            q in proptest::collection::vec(0..WORDS.len(), 1..5),
        ) {
            let (hs, qs) = (words(&h), words(&q));
            prop_assert_eq!(degree(&format!("{hs} <sep> {qs}"), &qs, &en()), 0.0);
        }

        #[test]
        fn removing_history_never_lowers_degree(
            h in proptest::collection::vec(0..WORDS.len(), 1..8),
            q in proptest::collection::vec(0..WORDS.len(), 1..5),
            cut in 0usize..8,
        ) {
            let n = en();
            let cut = cut.min(h.len());
            let full = degree(&words(&h), &words(&q), &n);
            let reduced = degree(&words(&h[cut..]), &words(&q), &n);
            prop_assert!(reduced >= full);
            prop_assert!((0.0..=1.0).contains(&full));
        }
    }
}
