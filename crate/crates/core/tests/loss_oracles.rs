use nsft_core::checks::{self, tiny_instance, TINY_CONFIG};
use nsft_core::construct::{Conversation, Provenance, Turn};
use nsft_core::losses::{
    bt_probability, dpo_logit, dpo_logit_noref, dpo_loss, neg_log_sigmoid, nsft_loss, per_token_kl, sft_loss,
    sft_loss_full, DpoConfig,
};
use nsft_core::model::{position_distributions, token_logprobs, InputContext, ModelParams};
use proptest::prelude::*;

fn sum_logprobs(p: &ModelParams, c: &InputContext, y: &[usize]) -> f64 {
    token_logprobs(p, c, y).unwrap().iter().sum()
}

#[test]
fn dpo_logit_matches_per_token_recomputation() {
    for seed in 0..50 {
        let t = tiny_instance(seed).unwrap();
        let s = &t.sample;
        let cfg = DpoConfig::new(0.1, t.reference.clone()).unwrap();
        let mut want = 0.0;
        for (y, sign) in [(&s.chosen, 1.0), (&s.rejected, -1.0)] {
            let lp = token_logprobs(&t.policy, &s.context, y).unwrap();
            let lr = token_logprobs(&t.reference, &s.context, y).unwrap();
            want += sign * lp.iter().zip(&lr).map(|(a, b)| a - b).sum::<f64>();
        }
        assert!((dpo_logit(&t.policy, &cfg, s).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn dpo_loss_is_composed_from_the_logit() {
    for seed in 0..50 {
        let t = tiny_instance(seed).unwrap();
        let cfg = DpoConfig::new(0.1, t.reference.clone()).unwrap();
        let p = dpo_logit(&t.policy, &cfg, &t.sample).unwrap();
        let want = (1.0 + (-0.1 * p).exp()).ln();
        assert!((dpo_loss(&t.policy, &cfg, &t.sample).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn uniform_reference_shifts_logit_by_length_difference() {
    let uniform = ModelParams::zeros(TINY_CONFIG).unwrap();
    let ln_v = (TINY_CONFIG.vocab_size as f64).ln();
    for seed in 0..50 {
        let t = tiny_instance(seed).unwrap();
        let s = &t.sample;
        let cfg = DpoConfig::new(1.0, uniform.clone()).unwrap();
        let shift = (s.chosen.len() as f64 - s.rejected.len() as f64) * ln_v;
        let with_ref = dpo_logit(&t.policy, &cfg, s).unwrap();
        assert!((with_ref - (dpo_logit_noref(&t.policy, s).unwrap() + shift)).abs() < 1e-10);
    }
}

#[test]
fn stable_bradley_terry_against_closed_form() {
    // σ(2) to 17 significant digits
    assert!((bt_probability(1000.0, 998.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
    assert!((bt_probability(-1000.0, -998.0) - 0.119_202_922_022_117_7).abs() < 1e-15);
    assert!(bt_probability(800.0, -800.0) <= 1.0);
}

#[test]
fn per_token_kl_matches_term_by_term_sum() {
    for seed in 0..30 {
        let t = tiny_instance(seed).unwrap();
        let s = &t.sample;
        let p = position_distributions(&t.policy, &s.context, &s.chosen).unwrap();
        let q = position_distributions(&t.reference, &s.context, &s.chosen).unwrap();
        let mut total = 0.0;
        for (lp, lq) in p.iter().zip(&q) {
            total += lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        }
        let want = total / s.chosen.len() as f64;
        let got = per_token_kl(&t.policy, &t.reference, &s.context, &s.chosen).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(got > 0.0);
    }
}

#[test]
fn nsft_decomposes_into_per_turn_losses() {
    for seed in 0..30 {
        let t = tiny_instance(seed).unwrap();
        let s = &t.sample;
        let latent = &s.context.image_latent;
        let gt = Conversation::new(
            vec![Turn::new(s.context.question.clone(), s.chosen.clone())],
            Provenance::Gt,
        )
        .unwrap();
        let mut second = Turn::new(vec![2, 4], s.rejected.clone());
        second.mask = (0..s.rejected.len())
            .map(|i| i + 1 == s.rejected.len() || i % 2 == 0)
            .collect();
        let constructed = Conversation::new(
            vec![Turn::new(vec![1], s.chosen.clone()), second.clone()],
            Provenance::Constructed,
        )
        .unwrap();
        let got = nsft_loss(&t.policy, latent, &gt, Some(&constructed)).unwrap();
        let turn_loss = |turn: &Turn| {
            sft_loss(
                &t.policy,
                &InputContext::new(latent.clone(), turn.question.clone()),
                &turn.answer,
                &turn.mask,
            )
            .unwrap()
        };
        let want = turn_loss(&gt.turns[0]) + turn_loss(&constructed.turns[0]) + turn_loss(&second);
        assert!((got.value - want).abs() < 1e-12);
        assert!(!got.gt_only);
        let empty = Conversation {
            turns: vec![],
            provenance: Provenance::Constructed,
        };
        let fallback = nsft_loss(&t.policy, latent, &gt, Some(&empty)).unwrap();
        assert!(fallback.gt_only);
        assert!((fallback.value - turn_loss(&gt.turns[0])).abs() < 1e-12);
    }
}

#[test]
fn dpo_loss_decreases_in_the_logit() {
    let grid: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.25).collect();
    for w in grid.windows(2) {
        assert!(neg_log_sigmoid(0.1 * w[1]) < neg_log_sigmoid(0.1 * w[0]));
    }
    assert!(neg_log_sigmoid(1e3) < 1e-300);
}

#[test]
fn gradients_agree_with_finite_differences_over_a_hundred_seeds() {
    for r in checks::finite_difference_agreement(100, 0xF1D, 0.1).unwrap() {
        assert!(r.passed, "{}", r.line());
    }
}

#[test]
fn identity_suite_passes() {
    let n = 100;
    let results = [
        checks::logit_noref_identity(2 * n, 1).unwrap(),
        checks::frozen_reference_gradients(n, 1).unwrap(),
        checks::dpo_gradient_decomposition(n, 1, 0.1).unwrap(),
        checks::dpo_gradient_decomposition(n, 2, 2.0).unwrap(),
        checks::implicit_reward_identity(n, 1, 0.1).unwrap(),
        checks::kl_penalty_never_decreases(n, 1).unwrap(),
    ];
    for r in results.iter().chain(&checks::closed_form_anchors(n, 1, 0.1).unwrap()) {
        assert!(r.passed, "{}", r.line());
    }
}

proptest! {
    #[test]
    fn kl_penalty_never_lowers_the_loss(seed in any::<u64>(), lambda in 0.0f64..100.0) {
        let t = tiny_instance(seed).unwrap();
        let s = &t.sample;
        let base = sft_loss_full(&t.policy, &s.context, &s.chosen).unwrap();
        let kl = per_token_kl(&t.policy, &t.reference, &s.context, &s.chosen).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(base + lambda * kl >= base);
    }

    #[test]
    fn reference_free_logit_is_minus_sft_difference(seed in any::<u64>()) {
        let t = tiny_instance(seed).unwrap();
        let s = &t.sample;
        let lc = sum_logprobs(&t.policy, &s.context, &s.chosen);
        let lr = sum_logprobs(&t.policy, &s.context, &s.rejected);
        prop_assert!((dpo_logit_noref(&t.policy, s).unwrap() - (lc - lr)).abs() < 1e-10);
    }
}
