//! Tokenization and normalization shared by the degree metric, Unigram F1
//! and the word-level reference model.
//!
//! Two tokenizers live here. [`tokenize`] is the surface tokenizer used by
//! BLEU/ROUGE and the model vocabulary: lowercase, punctuation split into
//! separate tokens, CJK ideographs one token each. [`Normalizer::normalize`]
//! builds on it and additionally drops punctuation and stop words and
//! lemmatizes what is left.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::SEPARATOR;
use crate::error::{Error, Result};

const EN_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");
const EN_LEMMA_EXCEPTIONS: &str = include_str!("../data/lemma_exceptions_en.tsv");
const ZH_STOPWORDS: &str = include_str!("../data/stopwords_zh.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::En => f.write_str("en"),
            Language::Zh => f.write_str("zh"),
        }
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(Language::En),
            "zh" => Ok(Language::Zh),
            other => Err(Error::Config(format!(
                "unknown language {other:?} (expected en or zh)"
            ))),
        }
    }
}

/// Content tokens of a text after filtering and lemmatization.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizedTokens {
    pub tokens: Vec<String>,
    /// Number of surface tokens (punctuation included) before filtering.
    pub source_len: usize,
}

impl NormalizedTokens {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

/// Pluggable normalization pipeline.
///
/// Implementations must keep `lemmatize` idempotent. Everything that computes
/// a degree or a Unigram F1 takes a `&dyn Normalizer`, so a full NLP pipeline
/// can be dropped in without touching the callers.
pub trait Normalizer: Send + Sync {
    fn language(&self) -> Language;

    fn is_stopword(&self, token: &str) -> bool;

    fn lemmatize(&self, token: &str) -> String;

    fn normalize(&self, text: &str) -> NormalizedTokens {
        let raw = tokenize(text);
        let source_len = raw.len();
        let tokens = raw
            .into_iter()
            .filter(|t| t != SEPARATOR && !is_punctuation(t) && !self.is_stopword(t))
            .map(|t| self.lemmatize(&t))
            .filter(|t| !t.is_empty() && !self.is_stopword(t))
            .collect();
        NormalizedTokens { tokens, source_len }
    }
}

/// Free-function form of [`Normalizer::normalize`].
pub fn normalize(text: &str, normalizer: &dyn Normalizer) -> NormalizedTokens {
    normalizer.normalize(text)
}

/// Shipped normalizer for `lang`.
pub fn default_normalizer(lang: Language) -> Arc<dyn Normalizer> {
    match lang {
        Language::En => Arc::new(EnglishNormalizer::default()),
        Language::Zh => Arc::new(ChineseNormalizer::default()),
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF)
}

fn is_punct_char(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// True when every char of `token` is punctuation or a symbol.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct_char)
}

/// Surface tokenizer: lowercase, whitespace split, punctuation and CJK
/// characters emitted as single-char tokens. The history separator is kept
/// whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(SEPARATOR) {
            flush(&mut cur, &mut out);
            out.push(SEPARATOR.to_string());
            rest = &rest[SEPARATOR.len()..];
            continue;
        }
        rest = &rest[c.len_utf8()..];
        if c.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if is_punct_char(c) || is_cjk(c) {
            flush(&mut cur, &mut out);
            out.extend(std::iter::once(c.to_lowercase().collect::<String>()));
        } else {
            cur.extend(c.to_lowercase());
        }
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(std::mem::take(cur));
    }
}

/// Parses a one-entry-per-line word list. Blank lines and `#` comments are
/// skipped.
pub fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// Parses `word<TAB>lemma` lines.
pub fn parse_lemma_table(text: &str, origin: &str) -> Result<HashMap<String, String>> {
    let mut table = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, lemma) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message: "expected word<TAB>lemma".into(),
        })?;
        table.insert(word.trim().to_lowercase(), lemma.trim().to_lowercase());
    }
    Ok(table)
}

/// English normalizer: frozen stop-word list plus a suffix-rule lemmatizer
/// backed by an exception table.
#[derive(Debug, Clone)]
pub struct EnglishNormalizer {
    stopwords: HashSet<String>,
    exceptions: HashMap<String, String>,
}

impl Default for EnglishNormalizer {
    fn default() -> Self {
        Self {
            stopwords: parse_word_list(EN_STOPWORDS),
            exceptions: parse_lemma_table(EN_LEMMA_EXCEPTIONS, "lemma_exceptions_en.tsv")
                .expect("bundled lemma table is well formed"),
        }
    }
}

impl EnglishNormalizer {
    pub fn new(stopwords: HashSet<String>, exceptions: HashMap<String, String>) -> Self {
        Self {
            stopwords,
            exceptions,
        }
    }

    pub fn from_files(stopwords: &Path, exceptions: &Path) -> Result<Self> {
        let sw = std::fs::read_to_string(stopwords).map_err(|e| Error::io(stopwords, e))?;
        let ex = std::fs::read_to_string(exceptions).map_err(|e| Error::io(exceptions, e))?;
        Ok(Self::new(
            parse_word_list(&sw),
            parse_lemma_table(&ex, &exceptions.display().to_string())?,
        ))
    }

    /// One rewrite step; `lemmatize` iterates this to a fixed point.
    fn step(&self, w: &str) -> String {
        if let Some(lemma) = self.exceptions.get(w) {
            return lemma.clone();
        }
        if w.len() <= 3 || !w.bytes().all(|b| b.is_ascii_lowercase()) {
            return w.to_string();
        }
        if let Some(stem) = w.strip_suffix("ies") {
            if stem.len() >= 2 {
                return format!("{stem}y");
            }
        }
        if w.ends_with("sses") {
            return w[..w.len() - 2].to_string();
        }
        for suffix in ["xes", "ches", "shes"] {
            if w.ends_with(suffix) {
                return w[..w.len() - 2].to_string();
            }
        }
        if w.ends_with('s') && !["ss", "us", "is"].iter().any(|s| w.ends_with(s)) {
            return w[..w.len() - 1].to_string();
        }
        if let Some(stem) = w.strip_suffix("ing") {
            if let Some(s) = verb_stem(stem) {
                return s;
            }
        }
        if !w.ends_with("eed") {
            if let Some(stem) = w.strip_suffix("ed") {
                if let Some(s) = verb_stem(stem) {
                    return s;
                }
            }
        }
        w.to_string()
    }
}

/// Stem left after stripping -ing/-ed, undoubling a final consonant
/// ("running" -> "run"). None when the stem is too short to be a word.
fn verb_stem(stem: &str) -> Option<String> {
    if stem.len() < 3 || !stem.bytes().any(|b| b"aeiouy".contains(&b)) {
        return None;
    }
    let b = stem.as_bytes();
    let (last, prev) = (b[b.len() - 1], b[b.len() - 2]);
    if last == prev && !b"aeioulsz".contains(&last) {
        return Some(stem[..stem.len() - 1].to_string());
    }
    Some(stem.to_string())
}

impl Normalizer for EnglishNormalizer {
    fn language(&self) -> Language {
        Language::En
    }

    fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    fn lemmatize(&self, token: &str) -> String {
        let mut cur = token.to_string();
        // Every rule shortens the word, so only an exception cycle could
        // keep this going; the bound makes such a table fail loudly in tests.
        for _ in 0..64 {
            let next = self.step(&cur);
            if next == cur {
                return cur;
            }
            cur = next;
        }
        cur
    }
}

/// Character-level Chinese normalizer. Lemmatization is the identity.
#[derive(Debug, Clone)]
pub struct ChineseNormalizer {
    stopwords: HashSet<String>,
}

impl Default for ChineseNormalizer {
    fn default() -> Self {
        Self {
            stopwords: parse_word_list(ZH_STOPWORDS),
        }
    }
}

impl ChineseNormalizer {
    pub fn new(stopwords: HashSet<String>) -> Self {
        Self { stopwords }
    }
}

impl Normalizer for ChineseNormalizer {
    fn language(&self) -> Language {
        Language::Zh
    }

    fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }

    fn lemmatize(&self, token: &str) -> String {
        token.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn en() -> EnglishNormalizer {
        EnglishNormalizer::default()
    }

    #[test]
    fn empty_input() {
        let n = en().normalize("");
        assert!(n.tokens.is_empty());
        assert_eq!(n.source_len, 0);
    }

    #[test]
    fn oranges_example() {
        let n = en().normalize("The effect, of eating oranges!");
        assert_eq!(n.tokens, vec!["effect", "eat", "orange"]);
        // the effect , of eating oranges !
        assert_eq!(n.source_len, 7);
    }

    #[test]
    fn duplicates_preserved() {
        assert_eq!(en().normalize("orange orange").tokens, vec!["orange", "orange"]);
    }

    #[test]
    fn lemma_rules() {
        let n = en();
        for (w, l) in [
            ("studies", "study"),
            ("glasses", "glass"),
            ("boxes", "box"),
            ("running", "run"),
            ("walked", "walk"),
            ("strength", "strength"),
            ("bus", "bus"),
            ("was", "be"),
            ("children", "child"),
            ("string", "string"),
        ] {
            assert_eq!(n.lemmatize(w), l, "{w}");
        }
    }

    #[test]
    fn bundled_exception_lemmas_are_fixed_points() {
        let n = en();
        for lemma in n.exceptions.values() {
            assert_eq!(&n.lemmatize(lemma), lemma);
        }
    }

    #[test]
    fn tokenizer_splits_punctuation_and_keeps_separator() {
        assert_eq!(
            tokenize("User: Hello, world <sep> bot: hi!"),
            vec!["user", ":", "hello", ",", "world", "<sep>", "bot", ":", "hi", "!"]
        );
        assert_eq!(tokenize("我喜欢Rust"), vec!["我", "喜", "欢", "rust"]);
    }

    #[test]
    fn separator_never_survives_normalization() {
        assert_eq!(en().normalize("grip <sep> strength").tokens, vec!["grip", "strength"]);
    }

    #[test]
    fn chinese_character_level() {
        let zh = ChineseNormalizer::default();
        let n = zh.normalize("我喜欢喝咖啡。");
        assert_eq!(n.tokens, vec!["喜", "欢", "喝", "咖", "啡"]);
    }

    #[test]
    fn lemma_table_parse_error_names_line() {
        let err = parse_lemma_table("# c\nok\tok\nbroken\n", "t.tsv").unwrap_err();
        assert!(err.to_string().contains("t.tsv:3"), "{err}");
    }

    #[test]
    fn language_from_str() {
        assert_eq!("zh".parse::<Language>().unwrap(), Language::Zh);
        assert!("fr".parse::<Language>().is_err());
    }

    proptest! {
        #[test]
        fn lemmatize_idempotent(w in "[a-z]{1,12}") {
            let n = en();
            let once = n.lemmatize(&w);
            prop_assert_eq!(n.lemmatize(&once), once);
        }

        #[test]
        fn normalized_tokens_are_stable(text in "[a-zA-Z ,.!?']{0,60}") {
            let n = en();
            let out = n.normalize(&text);
            for t in &out.tokens {
                prop_assert!(!n.is_stopword(t));
                prop_assert_eq!(t.to_lowercase(), t.clone());
                let again = n.normalize(t);
                prop_assert_eq!(again.tokens, vec![t.clone()]);
            }
            prop_assert_eq!(n.normalize(&text), out);
        }
    }
}
