//! The seq2seq contract that every training strategy runs against, decoding
//! on top of it, and the bundled reference model.

mod checkpoint;
mod reference;
mod search;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DialogueExample;
use crate::error::{Error, Result};
use crate::textnorm::tokenize;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use reference::{ModelConfig, ReferenceModel};
pub use search::{beam_search, beam_search_with_budget, greedy_decode, BeamCandidate, DEFAULT_EXPANSION_BUDGET};

pub type TokenId = u32;

/// Token <-> id mapping with four reserved ids at the front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const RESERVED: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

    /// Vocabulary over the surface tokens of `texts`: reserved tokens
    /// first, then tokens seen at least `min_count` times ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !Self::RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = Self::RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("built vocab is valid")
    }

    /// Vocabulary from an explicit token list whose first four entries are
    /// the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::RESERVED.len()
            || tokens.iter().zip(Self::RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::Validation(format!(
                "vocab must start with {:?}",
                Self::RESERVED
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Validation(format!("duplicate vocab token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens plus `n` placeholder words, for toy models.
    pub fn synthetic(n: usize) -> Self {
        let tokens = Self::RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain((0..n).map(|i| format!("w{i}")))
            .collect();
        Self::from_tokens(tokens).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids the decoder may emit: everything except pad and bos.
    pub fn is_generatable(id: TokenId) -> bool {
        id != Self::PAD && id != Self::BOS
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.len()) {
            Some(bad) => Err(Error::Validation(format!(
                "token id {bad} out of range for vocab of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    /// Surface-tokenizes a history and keeps the last `max_len` ids, so the
    /// oldest turns are dropped first.
    pub fn encode_history(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        let ids: Vec<TokenId> = tokenize(text).iter().map(|t| self.id(t)).collect();
        let start = ids.len().saturating_sub(max_len);
        let mut ids = ids[start..].to_vec();
        if ids.is_empty() {
            ids.push(Self::PAD);
        }
        ids
    }

    /// Query ids truncated to `max_len` content tokens, eos appended.
    pub fn encode_query(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect();
        ids.push(Self::EOS);
        ids
    }

    /// Space-joined surface form, stopping at eos and skipping pad/bos.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&i| i != Self::EOS)
            .filter(|&&i| Self::is_generatable(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Incremental decoding over one encoded history. States are opaque
/// vectors owned by the implementation.
pub trait DecoderSession {
    /// State after consuming bos, with the distribution of the first token.
    fn start(&self) -> (Vec<f64>, Vec<f64>);

    /// State after consuming `token`, with the next-token distribution.
    fn advance(&self, state: &[f64], token: TokenId) -> (Vec<f64>, Vec<f64>);
}

/// Anything that maps (history, prefix) to a next-token distribution and
/// exposes its parameters as a flat vector.
///
/// The gradient hook is the only training entry point: strategies express
/// their objective as per-step target vectors `g_i` and the model returns
/// the gradient of `-sum_i g_i . log P_i` with the targets held constant.
pub trait Seq2seqModel: Send + Sync {
    fn vocab(&self) -> &Vocab;

    fn max_input_len(&self) -> usize;

    fn max_output_len(&self) -> usize;

    fn session<'a>(&'a self, history_ids: &[TokenId]) -> Result<Box<dyn DecoderSession + 'a>>;

    /// Teacher-forced distributions `P_i = p(. | H, target[..i])` for each
    /// position of `target_ids`.
    fn teacher_forced(&self, history_ids: &[TokenId], target_ids: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.vocab().check_ids(target_ids)?;
        let session = self.session(history_ids)?;
        let (mut state, first) = session.start();
        let mut out = vec![first];
        for &tok in &target_ids[..target_ids.len().saturating_sub(1)] {
            let (next, dist) = session.advance(&state, tok);
            state = next;
            out.push(dist);
        }
        out.truncate(target_ids.len());
        Ok(out)
    }

    /// Runs a teacher-forced pass, asks `targets` for the per-step target
    /// vectors given the distributions, and returns the distributions with
    /// the gradient of `-sum_i g_i . log P_i`.
    fn forward_backward(
        &self,
        history_ids: &[TokenId],
        target_ids: &[TokenId],
        targets: &mut dyn FnMut(&[Vec<f64>]) -> Vec<Vec<f64>>,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)>;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn save(&self, _path: &Path) -> Result<()> {
        Err(Error::Config("this model does not support checkpoints".into()))
    }
}

/// Next-token distribution after `prefix_ids` (bos is implicit).
pub fn next_token_dist(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    prefix_ids: &[TokenId],
) -> Result<Vec<f64>> {
    model.vocab().check_ids(prefix_ids)?;
    let session = model.session(history_ids)?;
    let (mut state, mut dist) = session.start();
    for &tok in prefix_ids {
        let (s, d) = session.advance(&state, tok);
        state = s;
        dist = d;
    }
    Ok(dist)
}

/// Sum of stepwise log-probabilities of `tokens` (eos included if present).
pub fn sequence_logprob(model: &dyn Seq2seqModel, history_ids: &[TokenId], tokens: &[TokenId]) -> Result<f64> {
    let dists = model.teacher_forced(history_ids, tokens)?;
    Ok(tokens
        .iter()
        .zip(&dists)
        .map(|(&t, d)| d[t as usize].ln())
        .sum())
}

/// Shannon entropy in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Mean entropy of the teacher-forced next-token distributions over every
/// gold position (eos included) of already-encoded pairs.
pub fn mean_entropy_encoded(model: &dyn Seq2seqModel, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("no examples for entropy".into()));
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for (h, q) in pairs {
        for d in model.teacher_forced(h, q)? {
            total += entropy(&d);
            positions += 1;
        }
    }
    Ok(total / positions as f64)
}

pub fn encode_example(model: &dyn Seq2seqModel, example: &DialogueExample) -> (Vec<TokenId>, Vec<TokenId>) {
    let v = model.vocab();
    (
        v.encode_history(&example.history(), model.max_input_len()),
        v.encode_query(&example.gold_query, model.max_output_len()),
    )
}

pub fn mean_predictive_entropy(model: &dyn Seq2seqModel, examples: &[DialogueExample]) -> Result<f64> {
    let pairs: Vec<_> = examples.iter().map(|e| encode_example(model, e)).collect();
    mean_entropy_encoded(model, &pairs)
}
