//! Top-k decoding.
//!
//! A candidate is a content prefix of at most `max_len` tokens followed by
//! eos; its score is the plain sum of stepwise log-probabilities including
//! the eos step. Log-probabilities only decrease as a prefix grows, so a
//! best-first expansion pops complete candidates in exact score order.
//! When the expansion budget runs out the remaining slots are filled by an
//! ordinary width-k beam over the open frontier.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{DecoderSession, Seq2seqModel, TokenId, Vocab};
use crate::error::{Error, Result};

/// Expansions allowed before falling back to pruned beam search.
pub const DEFAULT_EXPANSION_BUDGET: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    /// Ends with eos.
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub text: String,
}

/// Descending score, then ascending token ids.
fn rank(a_lp: f64, a_tok: &[TokenId], b_lp: f64, b_tok: &[TokenId]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_tok.cmp(b_tok))
}

struct Node {
    logprob: f64,
    tokens: Vec<TokenId>,
    complete: bool,
    /// Decoder state that produced the distribution over this node's last
    /// token; `None` for the root.
    parent_state: Option<Rc<Vec<f64>>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap pops the greatest: best score first, then smaller token
    // ids, then complete before open so ties resolve deterministically.
    fn cmp(&self, other: &Self) -> Ordering {
        rank(other.logprob, &other.tokens, self.logprob, &self.tokens)
            .then_with(|| self.complete.cmp(&other.complete))
    }
}

fn expand(session: &dyn DecoderSession, node: &Node) -> Result<(Vec<f64>, Vec<f64>)> {
    let (state, dist) = match (&node.parent_state, node.tokens.last()) {
        (Some(state), Some(&tok)) => session.advance(state, tok),
        _ => session.start(),
    };
    check_dist(&dist)?;
    Ok((state, dist))
}

fn check_dist(dist: &[f64]) -> Result<()> {
    if dist.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("model produced a non-finite next-token distribution".into()));
    }
    Ok(())
}

fn push_children(
    heap: &mut BinaryHeap<Node>,
    node: &Node,
    state: Vec<f64>,
    dist: &[f64],
    max_len: usize,
) {
    let eos_lp = dist[Vocab::EOS as usize].ln();
    if eos_lp.is_finite() {
        let mut tokens = node.tokens.clone();
        tokens.push(Vocab::EOS);
        heap.push(Node {
            logprob: node.logprob + eos_lp,
            tokens,
            complete: true,
            parent_state: None,
        });
    }
    if node.tokens.len() >= max_len {
        return;
    }
    let state = Rc::new(state);
    for (id, &p) in dist.iter().enumerate() {
        let id = id as TokenId;
        if id == Vocab::EOS || !Vocab::is_generatable(id) || p <= 0.0 {
            continue;
        }
        let mut tokens = node.tokens.clone();
        tokens.push(id);
        heap.push(Node {
            logprob: node.logprob + p.ln(),
            tokens,
            complete: false,
            parent_state: Some(state.clone()),
        });
    }
}

/// Up to `beam_width` distinct candidates sorted by log-probability
/// (descending), ties broken by token ids.
pub fn beam_search(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<BeamCandidate>> {
    beam_search_with_budget(model, history_ids, beam_width, max_len, DEFAULT_EXPANSION_BUDGET)
}

pub fn beam_search_with_budget(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    beam_width: usize,
    max_len: usize,
    budget: usize,
) -> Result<Vec<BeamCandidate>> {
    let k = beam_width.max(1);
    let session = model.session(history_ids)?;
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        logprob: 0.0,
        tokens: Vec::new(),
        complete: false,
        parent_state: None,
    });
    let mut found: Vec<(f64, Vec<TokenId>)> = Vec::new();
    let mut expansions = 0usize;
    while found.len() < k {
        let Some(node) = heap.pop() else { break };
        if node.complete {
            found.push((node.logprob, node.tokens));
            continue;
        }
        if expansions >= budget {
            heap.push(node);
            fill_with_beam(session.as_ref(), heap, &mut found, k, max_len)?;
            break;
        }
        expansions += 1;
        let (state, dist) = expand(session.as_ref(), &node)?;
        push_children(&mut heap, &node, state, &dist, max_len);
    }
    found.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
    found.truncate(k);
    let vocab = model.vocab();
    Ok(found
        .into_iter()
        .map(|(logprob, tokens)| BeamCandidate {
            text: vocab.decode(&tokens),
            tokens,
            logprob,
        })
        .collect())
}

/// Width-k beam continuation from the open frontier once the exact search
/// has spent its budget.
fn fill_with_beam(
    session: &dyn DecoderSession,
    heap: BinaryHeap<Node>,
    found: &mut Vec<(f64, Vec<TokenId>)>,
    k: usize,
    max_len: usize,
) -> Result<()> {
    let mut done: Vec<(f64, Vec<TokenId>)> = Vec::new();
    let mut live: Vec<Node> = Vec::new();
    for node in heap.into_sorted_vec().into_iter().rev() {
        if node.complete {
            done.push((node.logprob, node.tokens));
        } else if live.len() < k {
            live.push(node);
        }
    }
    while !live.is_empty() {
        let mut next = BinaryHeap::new();
        for node in &live {
            let (state, dist) = expand(session, node)?;
            push_children(&mut next, node, state, &dist, max_len);
        }
        live.clear();
        while let Some(node) = next.pop() {
            if node.complete {
                done.push((node.logprob, node.tokens));
            } else if live.len() < k {
                live.push(node);
            }
        }
    }
    done.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
    let need = k - found.len();
    found.extend(done.into_iter().take(need));
    Ok(())
}

/// Stepwise argmax decoding (lowest id on ties), eos forced after
/// `max_len` content tokens.
pub fn greedy_decode(model: &dyn Seq2seqModel, history_ids: &[TokenId], max_len: usize) -> Result<BeamCandidate> {
    let session = model.session(history_ids)?;
    let (mut state, mut dist) = session.start();
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    loop {
        check_dist(&dist)?;
        let best = if tokens.len() >= max_len {
            Vocab::EOS
        } else {
            dist.iter()
                .enumerate()
                .filter(|(i, _)| Vocab::is_generatable(*i as TokenId))
                .fold((Vocab::EOS, f64::NEG_INFINITY), |acc, (i, &p)| {
                    if p > acc.1 {
                        (i as TokenId, p)
                    } else {
                        acc
                    }
                })
                .0
        };
        logprob += dist[best as usize].ln();
        tokens.push(best);
        if best == Vocab::EOS {
            break;
        }
        let (s, d) = session.advance(&state, best);
        state = s;
        dist = d;
    }
    Ok(BeamCandidate {
        text: model.vocab().decode(&tokens),
        tokens,
        logprob,
    })
}
