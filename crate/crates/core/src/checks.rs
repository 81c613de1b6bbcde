//! Numerical invariant suite over random tiny instances: the loss identities,
//! gradient checks against finite differences, and the t1/t2 ratio analysis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff, max_relative_error, max_tensor_relative_error, relative_error, Tensor};
use crate::construct::{Conversation, Provenance, Turn};
use crate::error::Result;
use crate::losses::{
    bt_probability, conversation_sft_var, dpo_logit, dpo_logit_noref, dpo_logit_noref_var, dpo_logit_var, dpo_loss,
    dpo_loss_var, implicit_reward, nsft_loss_var, per_token_kl, per_token_kl_var, sequence_logprob_var, sft_loss,
    sft_loss_full, sft_loss_var, sigmoid, value_and_grad, value_and_grad_with_reference, DpoConfig, PreferenceSample,
};
use crate::model::{InputContext, ModelConfig, ModelParams, TokenId};
use crate::theory::{dpo_loss_t, dpo_partials, update_rate_ratio, RatioPoint};
use crate::world::derive_seed;

/// Step used for every finite-difference gradient check.
pub const FD_EPS: f64 = 1e-4;

pub const TINY_CONFIG: ModelConfig = ModelConfig {
    vocab_size: 16,
    dim: 8,
    latent_dim: 4,
    blocks: 2,
};

/// Outcome of one identity over a sweep of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Largest observed error, in the check's own metric.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} instances={} worst={:e} tol={:e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance
        )
    }
}

/// A random policy, a different random reference, and a preference pair.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub policy: ModelParams,
    pub reference: ModelParams,
    pub sample: PreferenceSample,
}

fn random_tokens(rng: &mut ChaCha8Rng, v: usize, max_len: usize) -> Vec<TokenId> {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| rng.random_range(0..v)).collect()
}

pub fn tiny_instance(seed: u64) -> Result<TinyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7111));
    let cfg = TINY_CONFIG;
    let latent = (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let question = random_tokens(&mut rng, cfg.vocab_size, 3);
    let chosen = random_tokens(&mut rng, cfg.vocab_size, 4);
    let rejected = random_tokens(&mut rng, cfg.vocab_size, 4);
    Ok(TinyInstance {
        policy: ModelParams::init(cfg, derive_seed(seed, 1))?,
        reference: ModelParams::init(cfg, derive_seed(seed, 2))?,
        sample: PreferenceSample {
            context: InputContext::new(latent, question),
            chosen,
            rejected,
        },
    })
}

fn seeds(n: usize, base: u64) -> impl Iterator<Item = u64> {
    (0..n as u64).map(move |i| derive_seed(base, i))
}

/// `p'_dpo + (L_sft(y_c) - L_sft(y_r)) = 0`.
pub fn logit_noref_identity(n: usize, base: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for s in seeds(n, base) {
        let t = tiny_instance(s)?;
        let p = &t.sample;
        let lc = sft_loss_full(&t.policy, &p.context, &p.chosen)?;
        let lr = sft_loss_full(&t.policy, &p.context, &p.rejected)?;
        worst = worst.max((dpo_logit_noref(&t.policy, p)? + (lc - lr)).abs());
    }
    Ok(CheckResult::new("logit_noref_equals_sft_difference", n, worst, 1e-10))
}

/// The frozen reference contributes no gradient: `∇p_dpo = ∇p'_dpo`.
pub fn frozen_reference_gradients(n: usize, base: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for s in seeds(n, base) {
        let t = tiny_instance(s)?;
        let (_, with_ref) =
            value_and_grad_with_reference(&t.policy, &t.reference, |g, pv| dpo_logit_var(g, pv, &t.sample))?;
        let (_, noref) = value_and_grad(&t.policy, |g, v| dpo_logit_noref_var(g, v, &t.policy.config, &t.sample))?;
        worst = worst.max(max_abs_diff(&with_ref, &noref));
    }
    Ok(CheckResult::new("frozen_reference_gradients_match", n, worst, 1e-10))
}

fn max_abs_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn sft_grad(params: &ModelParams, ctx: &InputContext, y: &[TokenId]) -> Result<Vec<Tensor>> {
    let mask = vec![true; y.len()];
    Ok(value_and_grad(params, |g, v| sft_loss_var(g, v, &params.config, ctx, y, &mask))?.1)
}

/// `∇L_dpo = β σ(-β p_dpo) (∇L_sft(y_c) - ∇L_sft(y_r))`, componentwise.
pub fn dpo_gradient_decomposition(n: usize, base: u64, beta: f64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for s in seeds(n, base) {
        let t = tiny_instance(s)?;
        let p = &t.sample;
        let cfg = DpoConfig::new(beta, t.reference.clone())?;
        let logit = dpo_logit(&t.policy, &cfg, p)?;
        let (_, direct) = value_and_grad_with_reference(&t.policy, &t.reference, |g, pv| dpo_loss_var(g, pv, beta, p))?;
        let gc = sft_grad(&t.policy, &p.context, &p.chosen)?;
        let gr = sft_grad(&t.policy, &p.context, &p.rejected)?;
        let scale = beta * sigmoid(-beta * logit);
        let composed = gc
            .iter()
            .zip(&gr)
            .map(|(c, r)| {
                let data = c.data().iter().zip(r.data()).map(|(a, b)| scale * (a - b)).collect();
                Tensor::new(c.shape().to_vec(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max(max_relative_error(&direct, &composed)?);
    }
    Ok(CheckResult::new(
        "dpo_gradient_is_scaled_sft_difference",
        n,
        worst,
        1e-6,
    ))
}

/// A scalar loss of the policy weights with its tape gradient.
struct LossCase {
    name: &'static str,
    eval: Box<dyn Fn(&ModelParams) -> Result<f64>>,
    grad: Box<dyn Fn(&ModelParams) -> Result<Vec<Tensor>>>,
}

fn loss_cases(t: &TinyInstance, beta: f64) -> Result<Vec<LossCase>> {
    let p = t.sample.clone();
    let reference = t.reference.clone();
    let mut mask = vec![true; p.chosen.len()];
    mask[0] = p.chosen.len() == 1;
    let gt = Conversation::new(
        vec![Turn::new(p.context.question.clone(), p.chosen.clone())],
        Provenance::Gt,
    )?;
    let constructed = Conversation::new(
        vec![
            Turn::new(p.rejected.clone(), p.chosen.clone()),
            Turn::new(p.chosen.clone(), p.rejected.clone()),
        ],
        Provenance::Constructed,
    )?;
    let mut cases = Vec::new();
    {
        let (p1, p2, m1, m2) = (p.clone(), p.clone(), mask.clone(), mask);
        cases.push(LossCase {
            name: "sft_loss",
            eval: Box::new(move |w| sft_loss(w, &p1.context, &p1.chosen, &m1)),
            grad: Box::new(move |w| {
                Ok(value_and_grad(w, |g, v| sft_loss_var(g, v, &w.config, &p2.context, &p2.chosen, &m2))?.1)
            }),
        });
    }
    {
        let (p1, p2) = (p.clone(), p.clone());
        cases.push(LossCase {
            name: "sequence_logprob",
            eval: Box::new(move |w| crate::losses::sequence_logprob(w, &p1.context, &p1.rejected)),
            grad: Box::new(move |w| {
                Ok(value_and_grad(w, |g, v| {
                    sequence_logprob_var(g, v, &w.config, &p2.context, &p2.rejected)
                })?
                .1)
            }),
        });
    }
    {
        let (p1, p2, r1, r2) = (p.clone(), p.clone(), reference.clone(), reference.clone());
        cases.push(LossCase {
            name: "dpo_logit",
            eval: Box::new(move |w| dpo_logit(w, &DpoConfig::new(beta, r1.clone())?, &p1)),
            grad: Box::new(move |w| Ok(value_and_grad_with_reference(w, &r2, |g, pv| dpo_logit_var(g, pv, &p2))?.1)),
        });
    }
    {
        let (p1, p2, r1, r2) = (p.clone(), p.clone(), reference.clone(), reference.clone());
        cases.push(LossCase {
            name: "dpo_loss",
            eval: Box::new(move |w| dpo_loss(w, &DpoConfig::new(beta, r1.clone())?, &p1)),
            grad: Box::new(move |w| {
                Ok(value_and_grad_with_reference(w, &r2, |g, pv| dpo_loss_var(g, pv, beta, &p2))?.1)
            }),
        });
    }
    {
        let (p1, p2) = (p.clone(), p.clone());
        cases.push(LossCase {
            name: "dpo_logit_noref",
            eval: Box::new(move |w| dpo_logit_noref(w, &p1)),
            grad: Box::new(move |w| Ok(value_and_grad(w, |g, v| dpo_logit_noref_var(g, v, &w.config, &p2))?.1)),
        });
    }
    {
        let (p1, p2, r1, r2) = (p.clone(), p.clone(), reference.clone(), reference);
        cases.push(LossCase {
            name: "per_token_kl",
            eval: Box::new(move |w| per_token_kl(w, &r1, &p1.context, &p1.chosen)),
            grad: Box::new(move |w| {
                Ok(value_and_grad_with_reference(w, &r2, |g, pv| per_token_kl_var(g, pv, &p2.context, &p2.chosen))?.1)
            }),
        });
    }
    {
        let latent = p.context.image_latent.clone();
        let (l1, l2, g1, g2, c1, c2) = (latent.clone(), latent, gt.clone(), gt, constructed.clone(), constructed);
        cases.push(LossCase {
            name: "nsft_loss",
            eval: Box::new(move |w| Ok(crate::losses::nsft_loss(w, &l1, &g1, Some(&c1))?.value)),
            grad: Box::new(move |w| {
                Ok(value_and_grad(w, |g, v| Ok(nsft_loss_var(g, v, &w.config, &l2, &g2, Some(&c2))?.0))?.1)
            }),
        });
    }
    {
        let (l1, l2, c1, c2) = (
            p.context.image_latent.clone(),
            p.context.image_latent.clone(),
            gt_pair(&p)?,
            gt_pair(&p)?,
        );
        cases.push(LossCase {
            name: "conversation_sft",
            eval: Box::new(move |w| {
                let mut g = crate::autodiff::Graph::new();
                let v = w.bind(&mut g, false);
                let out = conversation_sft_var(&mut g, &v, &w.config, &l1, &c1)?;
                Ok(g.scalar(out))
            }),
            grad: Box::new(move |w| Ok(value_and_grad(w, |g, v| conversation_sft_var(g, v, &w.config, &l2, &c2))?.1)),
        });
    }
    Ok(cases)
}

fn gt_pair(p: &PreferenceSample) -> Result<Conversation> {
    let mut second = Turn::new(p.rejected.clone(), p.rejected.clone());
    if second.mask.len() > 1 {
        second.mask[0] = false;
    }
    Conversation::new(
        vec![Turn::new(p.context.question.clone(), p.chosen.clone()), second],
        Provenance::Gt,
    )
}

/// Tape gradients of every loss against central differences, per tensor.
pub fn finite_difference_agreement(n: usize, base: u64, beta: f64) -> Result<Vec<CheckResult>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for s in seeds(n, base) {
        let t = tiny_instance(s)?;
        let params: Vec<Tensor> = t.policy.tensors().into_iter().cloned().collect();
        for (i, case) in loss_cases(&t, beta)?.into_iter().enumerate() {
            let tape = (case.grad)(&t.policy)?;
            let cfg = t.policy.config;
            let numeric = finite_diff(
                |ts| {
                    ModelParams::from_tensors(cfg, ts)
                        .and_then(|w| (case.eval)(&w))
                        .unwrap_or(f64::NAN)
                },
                &params,
                FD_EPS,
            )?;
            let err = max_tensor_relative_error(&tape, &numeric)?;
            let err = if err.is_nan() { f64::INFINITY } else { err };
            match worst.get_mut(i) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, w)| CheckResult::new(&format!("finite_difference_{name}"), n, w, 1e-5))
        .collect())
}

/// Bradley-Terry over implicit rewards reproduces `σ(β p_dpo)`.
pub fn implicit_reward_identity(n: usize, base: u64, beta: f64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for s in seeds(n, base) {
        let t = tiny_instance(s)?;
        let p = &t.sample;
        let cfg = DpoConfig::new(beta, t.reference.clone())?;
        let rc = implicit_reward(&t.policy, &cfg, &p.context, &p.chosen)?;
        let rr = implicit_reward(&t.policy, &cfg, &p.context, &p.rejected)?;
        let direct = sigmoid(beta * dpo_logit(&t.policy, &cfg, p)?);
        worst = worst.max((bt_probability(rc, rr) - direct).abs());
    }
    Ok(CheckResult::new(
        "bt_of_implicit_rewards_is_sigmoid_logit",
        n,
        worst,
        1e-10,
    ))
}

/// Anchors: DPO at the reference is ln 2, the uniform model's SFT loss is
/// `L ln V`, and `KL(π, π)` is exactly zero.
pub fn closed_form_anchors(n: usize, base: u64, beta: f64) -> Result<Vec<CheckResult>> {
    let (mut ln2, mut uniform, mut kl) = (0.0f64, 0.0f64, 0.0f64);
    let zeros = ModelParams::zeros(TINY_CONFIG)?;
    let ln_v = (TINY_CONFIG.vocab_size as f64).ln();
    for s in seeds(n, base) {
        let t = tiny_instance(s)?;
        let p = &t.sample;
        let at_ref = DpoConfig::new(beta, t.policy.clone())?;
        ln2 = ln2.max((dpo_loss(&t.policy, &at_ref, p)? - std::f64::consts::LN_2).abs());
        let l = sft_loss_full(&zeros, &p.context, &p.chosen)?;
        uniform = uniform.max((l - p.chosen.len() as f64 * ln_v).abs());
        kl = kl.max(per_token_kl(&t.policy, &t.policy, &p.context, &p.chosen)?.abs());
    }
    Ok(vec![
        CheckResult::new("dpo_loss_at_reference_is_ln2", n, ln2, 1e-12),
        CheckResult::new("uniform_sft_is_length_log_vocab", n, uniform, 1e-10),
        CheckResult::new("self_kl_is_zero", n, kl, 0.0),
    ])
}

/// `L_sft + λ KL ≥ L_sft` for `λ ≥ 0`; the metric is the largest decrease.
pub fn kl_penalty_never_decreases(n: usize, base: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for s in seeds(n, base) {
        let t = tiny_instance(s)?;
        let p = &t.sample;
        let base_loss = sft_loss_full(&t.policy, &p.context, &p.chosen)?;
        let kl = per_token_kl(&t.policy, &t.reference, &p.context, &p.chosen)?;
        for lambda in [0.0, 0.01, 0.1, 1.0, 10.0] {
            worst = worst.max(base_loss - (base_loss + lambda * kl));
        }
    }
    Ok(CheckResult::new("kl_penalty_never_decreases_loss", n, worst, 0.0))
}

const BETAS: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

fn ratio_points(n: usize, base: u64) -> Vec<RatioPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, 0x4a71));
    (0..n)
        .map(|i| {
            // log-uniform over [1e-3, 1e3]
            let t1 = 10f64.powf(rng.random_range(-3.0..3.0));
            let t2 = 10f64.powf(rng.random_range(-3.0..3.0));
            RatioPoint {
                t1,
                t2,
                beta: BETAS[i % BETAS.len()],
            }
        })
        .collect()
}

/// `|∂L/∂t1 / ∂L/∂t2| = t2/t1`, as relative error.
pub fn ratio_identity(n: usize, base: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for p in ratio_points(n, base) {
        worst = worst.max(relative_error(update_rate_ratio(&p)?, p.t2 / p.t1));
    }
    Ok(CheckResult::new("update_rate_ratio_is_t2_over_t1", n, worst, 1e-10))
}

/// Closed-form partials against central differences of `dpo_loss_t`.
pub fn partials_finite_difference(n: usize, base: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for p in ratio_points(n, base) {
        let (d1, d2) = dpo_partials(&p)?;
        let central = |f: &dyn Fn(f64) -> Result<f64>, x: f64| -> Result<f64> {
            let h = 1e-6 * x;
            Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
        };
        let f1 = central(&|t1| dpo_loss_t(&RatioPoint { t1, ..p }), p.t1)?;
        let f2 = central(&|t2| dpo_loss_t(&RatioPoint { t2, ..p }), p.t2)?;
        worst = worst.max(relative_error(d1, f1)).max(relative_error(d2, f2));
    }
    Ok(CheckResult::new(
        "dpo_partials_match_finite_differences",
        n,
        worst,
        1e-7,
    ))
}

/// The whole suite. `n` instances for the model-based checks, twice that for
/// the logit identity, and ten times that for the ratio sweeps.
pub fn run_all(n: usize, base: u64, beta: f64) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        logit_noref_identity(2 * n, base)?,
        frozen_reference_gradients(n, base)?,
        dpo_gradient_decomposition(n, base, beta)?,
    ];
    out.extend(finite_difference_agreement(n, base, beta)?);
    out.push(implicit_reward_identity(n, base, beta)?);
    out.extend(closed_form_anchors(n, base, beta)?);
    out.push(kl_penalty_never_decreases(n, base)?);
    out.push(ratio_identity(10 * n, base)?);
    out.push(partials_finite_difference(10 * n, base)?);
    Ok(out)
}
