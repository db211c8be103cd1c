//! Training objectives: cross-entropy, degree-based data weighting and
//! pruning, stepwise self-distillation, and whole-sequence REINFORCE with a
//! top-k mean baseline.
//!
//! Every objective is expressed through [`Seq2seqModel::forward_backward`]
//! as per-step target vectors `g_i`, the loss being `-sum_i g_i . log P_i`:
//!
//! | objective    | g_i                              |
//! |--------------|----------------------------------|
//! | CE           | one-hot(q_i)                     |
//! | data weight  | w * one-hot(q_i)                 |
//! | stepwise     | beta * P_i + (1 - beta) * one-hot |
//! | wholeseq     | gamma * one-hot(c_i)             |
//!
//! Targets are constants for differentiation, so the stepwise `P_i` and the
//! REINFORCE reward `gamma` carry no gradient.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DialogueExample;
use crate::error::{Error, Result};
use crate::metrics::{ScoringFunction, ScoringName};
use crate::model::{beam_search, BeamCandidate, Seq2seqModel, TokenId, Vocab};
use crate::overassoc::{Bucket, DegreeReport};

/// Floor applied to gold-token probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ce,
    Prune,
    DataWeight,
    Stepwise,
    Wholeseq,
    Combine,
}

impl Strategy {
    /// Strategies that fine-tune from a warm-up checkpoint.
    pub fn is_model_based(self) -> bool {
        matches!(self, Strategy::Stepwise | Strategy::Wholeseq | Strategy::Combine)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ce => "ce",
            Strategy::Prune => "prune",
            Strategy::DataWeight => "data_weight",
            Strategy::Stepwise => "stepwise",
            Strategy::Wholeseq => "wholeseq",
            Strategy::Combine => "combine",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ce" => Strategy::Ce,
            "prune" => Strategy::Prune,
            "data_weight" => Strategy::DataWeight,
            "stepwise" => Strategy::Stepwise,
            "wholeseq" => Strategy::Wholeseq,
            "combine" => Strategy::Combine,
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        })
    }
}

/// Hyperparameter presets for the two benchmark styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Woi,
    Dusinc,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "woi" => Ok(Profile::Woi),
            "dusinc" => Ok(Profile::Dusinc),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected woi or dusinc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightingConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: usize,
    pub scoring_fn: ScoringName,
    pub prune_keep_buckets: Vec<Bucket>,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self::for_profile(Strategy::Ce, Profile::Woi)
    }
}

impl WeightingConfig {
    /// alpha 2.0 / 0.5, beta 1.0 / 0.75, kappa 10 for WoI / DuSinc.
    pub fn for_profile(strategy: Strategy, profile: Profile) -> Self {
        let (alpha, beta) = match profile {
            Profile::Woi => (2.0, 1.0),
            Profile::Dusinc => (0.5, 0.75),
        };
        Self {
            strategy,
            alpha,
            beta,
            kappa: 10,
            scoring_fn: ScoringName::UniF1,
            prune_keep_buckets: vec![Bucket::Low, Bucket::Mid],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if self.kappa == 0 {
            return Err(Error::Config("kappa must be >= 1".into()));
        }
        if matches!(self.strategy, Strategy::Wholeseq | Strategy::Combine) && self.kappa < 2 {
            return Err(Error::Config(
                "wholeseq weighting needs kappa >= 2; with one candidate the reward is always 0".into(),
            ));
        }
        if self.prune_keep_buckets.is_empty() {
            return Err(Error::Config("prune_keep_buckets is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub scalar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<f64>>,
    /// w for data weighting, gamma for wholeseq, 1 otherwise.
    pub weight_applied: f64,
    /// Set when a gold probability fell below [`PROB_EPS`] and was clamped.
    pub clamped: bool,
}

fn clamped_ln(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS.ln(), true)
    } else {
        (p.ln(), false)
    }
}

fn check_gold(gold_ids: &[TokenId]) -> Result<()> {
    if gold_ids.last() != Some(&Vocab::EOS) {
        return Err(Error::Validation("gold sequence must end with eos".into()));
    }
    Ok(())
}

fn one_hot_targets(dists: &[Vec<f64>], ids: &[TokenId], scale: f64) -> Vec<Vec<f64>> {
    dists
        .iter()
        .zip(ids)
        .map(|(d, &t)| {
            let mut g = vec![0.0; d.len()];
            g[t as usize] = scale;
            g
        })
        .collect()
}

fn stepwise_targets(dists: &[Vec<f64>], ids: &[TokenId], beta: f64) -> Vec<Vec<f64>> {
    dists
        .iter()
        .zip(ids)
        .map(|(d, &t)| {
            let mut g: Vec<f64> = d.iter().map(|p| beta * p).collect();
            g[t as usize] += 1.0 - beta;
            g
        })
        .collect()
}

/// `-sum_i g_i . log P_i` with clamped logs, per position.
fn target_loss(dists: &[Vec<f64>], targets: &[Vec<f64>]) -> (Vec<f64>, bool) {
    let mut clamped = false;
    let per = dists
        .iter()
        .zip(targets)
        .map(|(d, g)| {
            -d.iter()
                .zip(g)
                .filter(|(_, &gi)| gi != 0.0)
                .map(|(&p, &gi)| {
                    let (lp, c) = clamped_ln(p);
                    clamped |= c;
                    gi * lp
                })
                .sum::<f64>()
        })
        .collect();
    (per, clamped)
}

fn loss_value(per_token: Vec<f64>, weight_applied: f64, clamped: bool) -> LossValue {
    LossValue {
        scalar: per_token.iter().sum(),
        per_token: Some(per_token),
        weight_applied,
        clamped,
    }
}

/// Shared driver: compute targets from the teacher-forced distributions,
/// the loss value, and (optionally) the gradient.
fn evaluate_targets(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    target_ids: &[TokenId],
    make_targets: impl Fn(&[Vec<f64>]) -> Vec<Vec<f64>>,
    with_grad: bool,
    weight_applied: f64,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    if with_grad {
        let mut targets = Vec::new();
        let (dists, grad) = model.forward_backward(history_ids, target_ids, &mut |d| {
            targets = make_targets(d);
            targets.clone()
        })?;
        let (per, clamped) = target_loss(&dists, &targets);
        Ok((loss_value(per, weight_applied, clamped), Some(grad)))
    } else {
        let dists = model.teacher_forced(history_ids, target_ids)?;
        let targets = make_targets(&dists);
        let (per, clamped) = target_loss(&dists, &targets);
        Ok((loss_value(per, weight_applied, clamped), None))
    }
}

/// Loss value with its gradient.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: LossValue,
    pub grad: Vec<f64>,
}

pub fn ce_loss(model: &dyn Seq2seqModel, history_ids: &[TokenId], gold_ids: &[TokenId]) -> Result<LossValue> {
    check_gold(gold_ids)?;
    let (v, _) = evaluate_targets(model, history_ids, gold_ids, |d| one_hot_targets(d, gold_ids, 1.0), false, 1.0)?;
    Ok(v)
}

pub fn ce_loss_grad(model: &dyn Seq2seqModel, history_ids: &[TokenId], gold_ids: &[TokenId]) -> Result<LossGrad> {
    check_gold(gold_ids)?;
    let (value, grad) =
        evaluate_targets(model, history_ids, gold_ids, |d| one_hot_targets(d, gold_ids, 1.0), true, 1.0)?;
    Ok(LossGrad {
        value,
        grad: grad.expect("requested"),
    })
}

/// `w = (1 - d)^alpha`.
pub fn instance_weight(d: f64, alpha: f64) -> f64 {
    (1.0 - d.clamp(0.0, 1.0)).powf(alpha)
}

fn check_weight_inputs(d: f64, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::Validation(format!("degree {d} outside [0, 1]")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Validation(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

pub fn weighted_ce_loss(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    gold_ids: &[TokenId],
    d: f64,
    alpha: f64,
) -> Result<LossValue> {
    check_gold(gold_ids)?;
    check_weight_inputs(d, alpha)?;
    let w = instance_weight(d, alpha);
    let (v, _) = evaluate_targets(model, history_ids, gold_ids, |ds| one_hot_targets(ds, gold_ids, w), false, w)?;
    Ok(v)
}

pub fn weighted_ce_loss_grad(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    gold_ids: &[TokenId],
    d: f64,
    alpha: f64,
) -> Result<LossGrad> {
    check_gold(gold_ids)?;
    check_weight_inputs(d, alpha)?;
    let w = instance_weight(d, alpha);
    let (value, grad) =
        evaluate_targets(model, history_ids, gold_ids, |ds| one_hot_targets(ds, gold_ids, w), true, w)?;
    Ok(LossGrad {
        value,
        grad: grad.expect("requested"),
    })
}

/// Keeps the examples whose bucket is in `keep`, in their original order.
pub fn prune_filter(
    examples: &[DialogueExample],
    report: &DegreeReport,
    keep: &[Bucket],
) -> Result<Vec<DialogueExample>> {
    if report.per_example.len() != examples.len() {
        return Err(Error::Validation(format!(
            "degree report covers {} examples, corpus has {}",
            report.per_example.len(),
            examples.len()
        )));
    }
    let kept: Vec<DialogueExample> = examples
        .iter()
        .zip(&report.per_example)
        .filter(|(_, e)| keep.contains(&e.bucket))
        .map(|(ex, _)| ex.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::Validation(format!(
            "pruning to buckets {keep:?} leaves no training examples"
        )));
    }
    Ok(kept)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Validation(format!("beta must be in [0, 1], got {beta}")));
    }
    Ok(())
}

pub fn stepwise_loss(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    gold_ids: &[TokenId],
    beta: f64,
) -> Result<LossValue> {
    check_gold(gold_ids)?;
    check_beta(beta)?;
    let (v, _) = evaluate_targets(model, history_ids, gold_ids, |d| stepwise_targets(d, gold_ids, beta), false, 1.0)?;
    Ok(v)
}

pub fn stepwise_loss_grad(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    gold_ids: &[TokenId],
    beta: f64,
) -> Result<LossGrad> {
    check_gold(gold_ids)?;
    check_beta(beta)?;
    let (value, grad) =
        evaluate_targets(model, history_ids, gold_ids, |d| stepwise_targets(d, gold_ids, beta), true, 1.0)?;
    Ok(LossGrad {
        value,
        grad: grad.expect("requested"),
    })
}

/// Draws a candidate with probability proportional to `exp(logprob)`,
/// renormalized over the list.
pub fn sample_candidate<'a, R: Rng + ?Sized>(candidates: &'a [BeamCandidate], rng: &mut R) -> Result<&'a BeamCandidate> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::Decode("no candidates to sample from".into()))?;
    if candidates.len() == 1 {
        return Ok(first);
    }
    let max = candidates.iter().map(|c| c.logprob).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|c| (c.logprob - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (c, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return Ok(c);
        }
        u -= w;
    }
    Ok(candidates.last().expect("non-empty"))
}

/// Mean score of all candidates against the reference.
pub fn baseline_reward(candidates: &[BeamCandidate], reference: &str, f: &dyn ScoringFunction) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Decode("no candidates for baseline reward".into()));
    }
    Ok(candidates.iter().map(|c| f.score(&c.text, reference)).sum::<f64>() / candidates.len() as f64)
}

/// Result of one wholeseq update on one instance.
#[derive(Debug, Clone)]
pub struct WholeseqOutcome {
    pub value: LossValue,
    /// Zero vector when gamma is 0.
    pub grad: Vec<f64>,
    pub sampled: BeamCandidate,
    /// Score s of the sampled candidate.
    pub reward: f64,
    /// Baseline s_b.
    pub baseline: f64,
}

impl WholeseqOutcome {
    pub fn gamma(&self) -> f64 {
        self.value.weight_applied
    }
}

/// Loss for a given candidate set and sampled candidate. Split out so the
/// reward arithmetic can be exercised with hand-made candidates.
pub fn wholeseq_from_candidates(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    candidates: &[BeamCandidate],
    sampled: &BeamCandidate,
    reference: &str,
    f: &dyn ScoringFunction,
    with_grad: bool,
) -> Result<WholeseqOutcome> {
    let baseline = baseline_reward(candidates, reference, f)?;
    let reward = f.score(&sampled.text, reference);
    let gamma = reward - baseline;
    let tokens = &sampled.tokens;
    let (value, grad) = if gamma == 0.0 {
        let per = vec![0.0; tokens.len()];
        (loss_value(per, 0.0, false), with_grad.then(|| vec![0.0; model.params().len()]))
    } else {
        evaluate_targets(model, history_ids, tokens, |d| one_hot_targets(d, tokens, gamma), with_grad, gamma)?
    };
    Ok(WholeseqOutcome {
        value,
        grad: grad.unwrap_or_default(),
        sampled: sampled.clone(),
        reward,
        baseline,
    })
}

/// Beam search for `kappa` candidates, sample one, reward it against the
/// reference relative to the candidate mean, and return the REINFORCE loss
/// `-gamma * log p(c)` with its gradient.
pub fn wholeseq_loss<R: Rng + ?Sized>(
    model: &dyn Seq2seqModel,
    history_ids: &[TokenId],
    reference: &str,
    config: &WeightingConfig,
    f: &dyn ScoringFunction,
    rng: &mut R,
) -> Result<WholeseqOutcome> {
    if config.kappa < 2 {
        return Err(Error::Config(
            "wholeseq weighting needs kappa >= 2; with one candidate the reward is always 0".into(),
        ));
    }
    let candidates = beam_search(model, history_ids, config.kappa, model.max_output_len())?;
    if candidates.is_empty() {
        return Err(Error::Decode("beam search returned no candidates".into()));
    }
    let sampled = sample_candidate(&candidates, rng)?.clone();
    wholeseq_from_candidates(model, history_ids, &candidates, &sampled, reference, f, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::make_scoring_function;
    use crate::model::{ModelConfig, ReferenceModel};
    use crate::textnorm::{default_normalizer, Language};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(zero: bool) -> ReferenceModel {
        ReferenceModel::new(
            Vocab::synthetic(6),
            ModelConfig {
                embed_dim: 4,
                hidden_dim: 5,
                pos_dim: 2,
                max_input_len: 16,
                max_output_len: 4,
                seed: 21,
                zero_output_init: zero,
            },
        )
        .unwrap()
    }

    fn cand(text: &str, logprob: f64) -> BeamCandidate {
        BeamCandidate {
            tokens: vec![Vocab::EOS],
            logprob,
            text: text.into(),
        }
    }

    #[test]
    fn ce_of_uniform_model() {
        let m = model(true);
        let v = ce_loss(&m, &[4, 5], &[6, 7, Vocab::EOS]).unwrap();
        assert!((v.scalar - 3.0 * 10f64.ln()).abs() < 1e-12);
        assert_eq!(v.per_token.as_ref().unwrap().len(), 3);
        assert!(!v.clamped);
        assert!(ce_loss(&m, &[4], &[6]).is_err());
    }

    #[test]
    fn hand_target_arithmetic() {
        // 2-token gold with probabilities (0.5, 0.25)
        let dists = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let (per, clamped) = target_loss(&dists, &one_hot_targets(&dists, &[0, 0], 1.0));
        assert!((per.iter().sum::<f64>() - 2.0794415416798357).abs() < 1e-12);
        assert!(!clamped);

        // |V| = 3, P = (0.5, 0.25, 0.25), gold 0, beta 0.5:
        // 0.5 * H(P) + 0.5 * ln 2 = 0.5 * 1.0397208 + 0.5 * 0.6931472
        let p = vec![vec![0.5, 0.25, 0.25]];
        let (per, _) = target_loss(&p, &stepwise_targets(&p, &[0], 0.5));
        assert!((per[0] - 0.8664339756999316).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped_and_flagged() {
        let dists = vec![vec![1.0, 0.0]];
        let (per, clamped) = target_loss(&dists, &one_hot_targets(&dists, &[1], 1.0));
        assert!(clamped);
        assert!((per[0] + PROB_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn instance_weights() {
        assert_eq!(instance_weight(0.5, 1.0), 0.5);
        assert_eq!(instance_weight(0.5, 2.0), 0.25);
        for d in [0.0, 0.3, 1.0] {
            assert_eq!(instance_weight(d, 0.0), 1.0);
        }
        assert_eq!(instance_weight(1.0, 2.0), 0.0);
    }

    #[test]
    fn weighted_ce_reductions() {
        let m = model(false);
        let (h, g) = ([4, 5, 6], [7, 8, Vocab::EOS]);
        let ce = ce_loss(&m, &h, &g).unwrap().scalar;
        assert_eq!(weighted_ce_loss(&m, &h, &g, 0.7, 0.0).unwrap().scalar, ce);
        assert_eq!(weighted_ce_loss(&m, &h, &g, 1.0, 2.0).unwrap().scalar, 0.0);
        let w = weighted_ce_loss(&m, &h, &g, 0.5, 2.0).unwrap();
        assert!((w.scalar - 0.25 * ce).abs() < 1e-12);
        assert_eq!(w.weight_applied, 0.25);
        assert!(weighted_ce_loss(&m, &h, &g, 1.5, 2.0).is_err());
    }

    #[test]
    fn stepwise_reductions() {
        let m = model(false);
        let (h, g) = ([4, 5, 6], [7, 8, Vocab::EOS]);
        let ce = ce_loss(&m, &h, &g).unwrap().scalar;
        assert!((stepwise_loss(&m, &h, &g, 0.0).unwrap().scalar - ce).abs() < 1e-12);
        let ent: f64 = m.teacher_forced(&h, &g).unwrap().iter().map(|d| crate::model::entropy(d)).sum();
        assert!((stepwise_loss(&m, &h, &g, 1.0).unwrap().scalar - ent).abs() < 1e-12);
        let s = stepwise_loss(&m, &h, &g, 0.3).unwrap().scalar;
        assert!((s - (0.3 * ent + 0.7 * ce)).abs() < 1e-12);
        assert!(stepwise_loss(&m, &h, &g, 1.2).is_err());
    }

    #[test]
    fn single_candidate_always_sampled() {
        let c = [cand("a", -3.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_candidate(&c, &mut rng).unwrap().text, "a");
        }
        assert!(sample_candidate(&[], &mut rng).is_err());
    }

    #[test]
    fn baseline_and_gamma() {
        let f = make_scoring_function("uni_f1", default_normalizer(Language::En)).unwrap();
        let same = [cand("grip strength", -1.0), cand("grip strength", -2.0)];
        assert_eq!(baseline_reward(&same, "grip strength", f.as_ref()).unwrap(), 1.0);
        let mixed = [cand("grip strength", -1.0), cand("coffee", -2.0)];
        assert_eq!(baseline_reward(&mixed, "grip strength", f.as_ref()).unwrap(), 0.5);
        assert!(baseline_reward(&[], "x", f.as_ref()).is_err());
    }

    #[test]
    fn gamma_zero_gives_zero_loss_and_gradient() {
        let m = model(false);
        let f = make_scoring_function("uni_f1", default_normalizer(Language::En)).unwrap();
        let cands = [cand("grip strength", -1.0), cand("grip strength", -2.0)];
        let out = wholeseq_from_candidates(&m, &[4], &cands, &cands[0], "grip strength", f.as_ref(), true).unwrap();
        assert_eq!(out.gamma(), 0.0);
        assert_eq!(out.value.scalar, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn wholeseq_rejects_small_kappa() {
        let m = model(false);
        let f = make_scoring_function("uni_f1", default_normalizer(Language::En)).unwrap();
        let cfg = WeightingConfig {
            kappa: 1,
            ..WeightingConfig::for_profile(Strategy::Wholeseq, Profile::Woi)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            wholeseq_loss(&m, &[4], "w0", &cfg, f.as_ref(), &mut rng),
            Err(Error::Config(_))
        ));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn profiles() {
        let w = WeightingConfig::for_profile(Strategy::DataWeight, Profile::Woi);
        assert_eq!((w.alpha, w.beta, w.kappa), (2.0, 1.0, 10));
        let d = WeightingConfig::for_profile(Strategy::DataWeight, Profile::Dusinc);
        assert_eq!((d.alpha, d.beta, d.kappa), (0.5, 0.75, 10));
        assert_eq!(w.prune_keep_buckets, vec![Bucket::Low, Bucket::Mid]);
        assert!("bogus".parse::<Strategy>().is_err());
        assert_eq!("data_weight".parse::<Strategy>().unwrap(), Strategy::DataWeight);
    }
}
