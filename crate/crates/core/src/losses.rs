//! SFT, DPO, Bradley-Terry, implicit reward, nSFT and per-token KL.
//!
//! Every loss has a graph builder (`*_var`) used for training and gradient
//! checks, and a plain evaluator returning `f64`. Sequence log-probabilities
//! are plain sums over tokens; nothing is length-normalized, so the
//! reference-free DPO logit is exactly the difference of two SFT losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, sigmoid_f64, Graph, Tensor, Var};
use crate::construct::Conversation;
use crate::error::{Error, Result};
use crate::model::{
    position_logprobs_var, token_logprobs_var, InputContext, ModelConfig, ModelParams, ParamVars, TokenId,
};

/// A context with a preferred and a dispreferred answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub context: InputContext,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl PreferenceSample {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::contract("chosen and rejected must be non-empty"));
        }
        if self.chosen.iter().chain(&self.rejected).any(|&t| t >= vocab_size) {
            return Err(Error::contract("token id outside vocabulary"));
        }
        Ok(())
    }
}

/// Temperature and frozen reference policy for DPO.
#[derive(Debug, Clone)]
pub struct DpoConfig {
    beta: f64,
    reference: ModelParams,
}

impl DpoConfig {
    pub fn new(beta: f64, reference: ModelParams) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::contract(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { beta, reference })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn reference(&self) -> &ModelParams {
        &self.reference
    }
}

fn same_vocab(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if a.vocab_size != b.vocab_size {
        return Err(Error::contract(format!(
            "policy vocabulary {} differs from reference {}",
            a.vocab_size, b.vocab_size
        )));
    }
    Ok(())
}

/// `log π(y | x)` as a scalar node.
pub fn sequence_logprob_var(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &ModelConfig,
    ctx: &InputContext,
    y: &[TokenId],
) -> Result<Var> {
    let lp = token_logprobs_var(g, vars, cfg, ctx, y)?;
    Ok(g.sum(lp))
}

/// `-Σ_{i: mask_i} log π(y_i | y_<i, x)`.
pub fn sft_loss_var(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &ModelConfig,
    ctx: &InputContext,
    y: &[TokenId],
    mask: &[bool],
) -> Result<Var> {
    if mask.len() != y.len() {
        return Err(Error::contract(format!(
            "mask of length {} for sequence of length {}",
            mask.len(),
            y.len()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::contract("sft_loss mask selects no tokens"));
    }
    let lp = token_logprobs_var(g, vars, cfg, ctx, y)?;
    let picked = if mask.iter().all(|m| *m) {
        lp
    } else {
        let weights = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
        let w = g.constant(Tensor::vector(weights));
        g.mul(lp, w)?
    };
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// Sum of per-turn SFT losses. Turns are conditioned on the shared image
/// latent and their own question.
pub fn conversation_sft_var(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &ModelConfig,
    image_latent: &[f64],
    conversation: &Conversation,
) -> Result<Var> {
    conversation.validate()?;
    let mut total: Option<Var> = None;
    for turn in &conversation.turns {
        let ctx = InputContext::new(image_latent.to_vec(), turn.question.clone());
        let l = sft_loss_var(g, vars, cfg, &ctx, &turn.answer, &turn.mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("validated non-empty"))
}

/// Policy/reference bindings on one graph.
pub struct PairVars<'a> {
    pub policy: &'a ParamVars,
    pub policy_cfg: &'a ModelConfig,
    pub reference: &'a ParamVars,
    pub reference_cfg: &'a ModelConfig,
}

/// `log π(y_c)/π_ref(y_c) - log π(y_r)/π_ref(y_r)`.
pub fn dpo_logit_var(g: &mut Graph, pv: &PairVars<'_>, sample: &PreferenceSample) -> Result<Var> {
    same_vocab(pv.policy_cfg, pv.reference_cfg)?;
    let pc = sequence_logprob_var(g, pv.policy, pv.policy_cfg, &sample.context, &sample.chosen)?;
    let rc = sequence_logprob_var(g, pv.reference, pv.reference_cfg, &sample.context, &sample.chosen)?;
    let pr = sequence_logprob_var(g, pv.policy, pv.policy_cfg, &sample.context, &sample.rejected)?;
    let rr = sequence_logprob_var(g, pv.reference, pv.reference_cfg, &sample.context, &sample.rejected)?;
    let chosen = g.sub(pc, rc)?;
    let rejected = g.sub(pr, rr)?;
    g.sub(chosen, rejected)
}

/// Reference-free logit `log π(y_c) - log π(y_r)`.
pub fn dpo_logit_noref_var(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &ModelConfig,
    sample: &PreferenceSample,
) -> Result<Var> {
    let pc = sequence_logprob_var(g, vars, cfg, &sample.context, &sample.chosen)?;
    let pr = sequence_logprob_var(g, vars, cfg, &sample.context, &sample.rejected)?;
    g.sub(pc, pr)
}

/// `-log σ(β · logit)` for an already-built logit node.
pub fn dpo_loss_from_logit(g: &mut Graph, logit: Var, beta: f64) -> Var {
    let z = g.scale(logit, beta);
    let ls = g.log_sigmoid(z);
    g.scale(ls, -1.0)
}

pub fn dpo_loss_var(g: &mut Graph, pv: &PairVars<'_>, beta: f64, sample: &PreferenceSample) -> Result<Var> {
    let logit = dpo_logit_var(g, pv, sample)?;
    Ok(dpo_loss_from_logit(g, logit, beta))
}

/// `(1/L) Σ_i KL(π(·|y_<i,x) ‖ π_ref(·|y_<i,x))`.
pub fn per_token_kl_var(g: &mut Graph, pv: &PairVars<'_>, ctx: &InputContext, y: &[TokenId]) -> Result<Var> {
    same_vocab(pv.policy_cfg, pv.reference_cfg)?;
    if y.is_empty() {
        return Err(Error::contract("per_token_kl needs a non-empty sequence"));
    }
    let prev = &y[..y.len() - 1];
    let lp = position_logprobs_var(g, pv.policy, pv.policy_cfg, ctx, prev)?;
    let lq = position_logprobs_var(g, pv.reference, pv.reference_cfg, ctx, prev)?;
    let p = g.exp(lp);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / y.len() as f64))
}

/// Result of [`nsft_loss`]: the value and whether the constructed term was
/// missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NsftLoss {
    pub value: f64,
    pub gt_only: bool,
}

/// `L_sft(GT) + L_sft(constructed)`; falls back to the GT term when no
/// constructed conversation is available.
pub fn nsft_loss_var(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &ModelConfig,
    image_latent: &[f64],
    gt: &Conversation,
    constructed: Option<&Conversation>,
) -> Result<(Var, bool)> {
    let gt_term = conversation_sft_var(g, vars, cfg, image_latent, gt)?;
    match constructed {
        Some(c) if !c.is_empty() => {
            let neg = conversation_sft_var(g, vars, cfg, image_latent, c)?;
            Ok((g.add(gt_term, neg)?, false))
        }
        _ => Ok((gt_term, true)),
    }
}

fn eval_single(params: &ModelParams, build: impl FnOnce(&mut Graph, &ParamVars) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let out = build(&mut g, &vars)?;
    Ok(g.scalar(out))
}

fn eval_pair(
    policy: &ModelParams,
    reference: &ModelParams,
    build: impl FnOnce(&mut Graph, &PairVars<'_>) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let pvars = policy.bind(&mut g, false);
    let rvars = reference.bind(&mut g, false);
    let pv = PairVars {
        policy: &pvars,
        policy_cfg: &policy.config,
        reference: &rvars,
        reference_cfg: &reference.config,
    };
    let out = build(&mut g, &pv)?;
    Ok(g.scalar(out))
}

pub fn sft_loss(params: &ModelParams, ctx: &InputContext, y: &[TokenId], mask: &[bool]) -> Result<f64> {
    eval_single(params, |g, v| sft_loss_var(g, v, &params.config, ctx, y, mask))
}

/// SFT loss with every token supervised.
pub fn sft_loss_full(params: &ModelParams, ctx: &InputContext, y: &[TokenId]) -> Result<f64> {
    sft_loss(params, ctx, y, &vec![true; y.len()])
}

pub fn sequence_logprob(params: &ModelParams, ctx: &InputContext, y: &[TokenId]) -> Result<f64> {
    eval_single(params, |g, v| sequence_logprob_var(g, v, &params.config, ctx, y))
}

pub fn dpo_logit(policy: &ModelParams, cfg: &DpoConfig, sample: &PreferenceSample) -> Result<f64> {
    eval_pair(policy, &cfg.reference, |g, pv| dpo_logit_var(g, pv, sample))
}

pub fn dpo_loss(policy: &ModelParams, cfg: &DpoConfig, sample: &PreferenceSample) -> Result<f64> {
    eval_pair(policy, &cfg.reference, |g, pv| dpo_loss_var(g, pv, cfg.beta, sample))
}

pub fn dpo_logit_noref(policy: &ModelParams, sample: &PreferenceSample) -> Result<f64> {
    eval_single(policy, |g, v| dpo_logit_noref_var(g, v, &policy.config, sample))
}

/// `exp(r_c) / (exp(r_c) + exp(r_r))`, shifted by the larger reward.
pub fn bt_probability(reward_chosen: f64, reward_rejected: f64) -> f64 {
    let m = reward_chosen.max(reward_rejected);
    let c = (reward_chosen - m).exp();
    let r = (reward_rejected - m).exp();
    c / (c + r)
}

/// `β log π(y|x)/π_ref(y|x)`; the additive constant is dropped since it
/// cancels in any Bradley-Terry comparison.
pub fn implicit_reward(policy: &ModelParams, cfg: &DpoConfig, ctx: &InputContext, y: &[TokenId]) -> Result<f64> {
    same_vocab(&policy.config, &cfg.reference.config)?;
    let lp = sequence_logprob(policy, ctx, y)?;
    let lr = sequence_logprob(&cfg.reference, ctx, y)?;
    Ok(cfg.beta * (lp - lr))
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_f64(x)
}

/// `-log σ(x)` evaluated without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    -log_sigmoid(x)
}

pub fn nsft_loss(
    params: &ModelParams,
    image_latent: &[f64],
    gt: &Conversation,
    constructed: Option<&Conversation>,
) -> Result<NsftLoss> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let (v, gt_only) = nsft_loss_var(&mut g, &vars, &params.config, image_latent, gt, constructed)?;
    Ok(NsftLoss {
        value: g.scalar(v),
        gt_only,
    })
}

pub fn per_token_kl(policy: &ModelParams, reference: &ModelParams, ctx: &InputContext, y: &[TokenId]) -> Result<f64> {
    eval_pair(policy, reference, |g, pv| per_token_kl_var(g, pv, ctx, y))
}

/// Value of a loss built on trainable `params`, with its gradient for every
/// tensor in [`ModelParams::tensors`] order.
pub fn value_and_grad(
    params: &ModelParams,
    build: impl FnOnce(&mut Graph, &ParamVars) -> Result<Var>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let out = vars
        .all()
        .into_iter()
        .map(|v| grads.get(v).cloned().expect("trainable leaf"))
        .collect();
    Ok((g.scalar(loss), out))
}

/// Like [`value_and_grad`] with a frozen reference model bound as constants.
pub fn value_and_grad_with_reference(
    policy: &ModelParams,
    reference: &ModelParams,
    build: impl FnOnce(&mut Graph, &PairVars<'_>) -> Result<Var>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pvars = policy.bind(&mut g, true);
    let rvars = reference.bind(&mut g, false);
    let pv = PairVars {
        policy: &pvars,
        policy_cfg: &policy.config,
        reference: &rvars,
        reference_cfg: &reference.config,
    };
    let loss = build(&mut g, &pv)?;
    let grads = g.backward(loss)?;
    let out = pvars
        .all()
        .into_iter()
        .map(|v| grads.get(v).cloned().expect("trainable leaf"))
        .collect();
    Ok((g.scalar(loss), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{Provenance, Turn};

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            dim: 8,
            latent_dim: 4,
            blocks: 2,
        }
    }

    fn sample() -> PreferenceSample {
        PreferenceSample {
            context: InputContext::new(vec![1.0, 0.0, -0.5, 0.25], vec![2, 3]),
            chosen: vec![4, 5, 15],
            rejected: vec![4, 6, 7, 15],
        }
    }

    #[test]
    fn uniform_sft_is_length_times_log_vocab() {
        let p = ModelParams::zeros(config()).unwrap();
        let s = sample();
        let l = sft_loss_full(&p, &s.context, &s.chosen).unwrap();
        assert!((l - 3.0 * 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_a_contract_violation() {
        let p = ModelParams::zeros(config()).unwrap();
        let s = sample();
        let err = sft_loss(&p, &s.context, &s.chosen, &[false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn partial_mask_drops_unselected_tokens() {
        let p = ModelParams::init(config(), 4).unwrap();
        let s = sample();
        let lp = crate::model::token_logprobs(&p, &s.context, &s.chosen).unwrap();
        let l = sft_loss(&p, &s.context, &s.chosen, &[false, true, true]).unwrap();
        assert!((l + lp[1] + lp[2]).abs() < 1e-12);
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let p = ModelParams::init(config(), 9).unwrap();
        let cfg = DpoConfig::new(0.1, p.clone()).unwrap();
        assert_eq!(dpo_logit(&p, &cfg, &sample()).unwrap(), 0.0);
        assert!((dpo_loss(&p, &cfg, &sample()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn identical_answers_give_zero_logits() {
        let p = ModelParams::init(config(), 9).unwrap();
        let r = ModelParams::init(config(), 10).unwrap();
        let cfg = DpoConfig::new(0.5, r).unwrap();
        let mut s = sample();
        s.rejected = s.chosen.clone();
        assert_eq!(dpo_logit(&p, &cfg, &s).unwrap(), 0.0);
        assert_eq!(dpo_logit_noref(&p, &s).unwrap(), 0.0);
    }

    #[test]
    fn beta_must_be_positive() {
        let p = ModelParams::zeros(config()).unwrap();
        assert!(DpoConfig::new(0.0, p.clone()).is_err());
        assert!(DpoConfig::new(-1.0, p).is_err());
    }

    #[test]
    fn bt_probability_anchors() {
        assert_eq!(bt_probability(0.3, 0.3), 0.5);
        assert!((bt_probability(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        // 1 / (1 + e^-2)
        assert!((bt_probability(1000.0, 998.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn implicit_reward_scales_with_beta() {
        let p = ModelParams::init(config(), 1).unwrap();
        let r = ModelParams::init(config(), 2).unwrap();
        let s = sample();
        let a = implicit_reward(&p, &DpoConfig::new(0.2, r.clone()).unwrap(), &s.context, &s.chosen).unwrap();
        let b = implicit_reward(&p, &DpoConfig::new(0.4, r).unwrap(), &s.context, &s.chosen).unwrap();
        assert!((2.0 * a - b).abs() < 1e-12);
        let same = implicit_reward(&p, &DpoConfig::new(0.4, p.clone()).unwrap(), &s.context, &s.chosen).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn kl_vanishes_at_reference_and_is_positive_elsewhere() {
        let p = ModelParams::init(config(), 1).unwrap();
        let r = ModelParams::init(config(), 2).unwrap();
        let s = sample();
        assert_eq!(per_token_kl(&p, &p, &s.context, &s.chosen).unwrap(), 0.0);
        assert!(per_token_kl(&p, &r, &s.context, &s.chosen).unwrap() > 0.0);
    }

    #[test]
    fn nsft_with_self_is_twice_sft_and_falls_back_without_construction() {
        let p = ModelParams::init(config(), 5).unwrap();
        let s = sample();
        let gt = Conversation::new(
            vec![Turn::new(s.context.question.clone(), s.chosen.clone())],
            Provenance::Gt,
        )
        .unwrap();
        let single = sft_loss_full(&p, &s.context, &s.chosen).unwrap();
        let both = nsft_loss(&p, &s.context.image_latent, &gt, Some(&gt)).unwrap();
        assert!((both.value - 2.0 * single).abs() < 1e-12);
        assert!(!both.gt_only);
        let fallback = nsft_loss(&p, &s.context.image_latent, &gt, None).unwrap();
        assert!((fallback.value - single).abs() < 1e-12);
        assert!(fallback.gt_only);
    }
}
