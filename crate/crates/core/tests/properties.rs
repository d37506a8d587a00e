use detox_core::corpus::{build_grammar, build_vocab, generate_corpus, CorpusConfig, Sentence};
use detox_core::eval::{EvalReport, SampleScore};
use detox_core::grpo_trainer::{
    clipped_objective, compute_advantages, grpo_loss, kl_k3, kl_k3_with, GroupSample, KlRatio,
    RewardBreakdown,
};
use detox_core::policy::{init_params, log_softmax_in_place, Network, PolicyDims, SequenceRecord};
use proptest::prelude::*;

fn sample_std(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-10.0f64..10.0, 2..9)) {
        let a = compute_advantages(&rewards);
        if sample_std(&rewards) >= 1e-8 {
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((sample_std(&a) - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn advantages_ignore_affine_reward_changes(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..9),
        scale in 0.1f64..20.0,
        shift in -50.0f64..50.0,
    ) {
        prop_assume!(sample_std(&rewards) > 1e-3);
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        for (x, y) in compute_advantages(&rewards).iter().zip(compute_advantages(&moved)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn k3_is_nonnegative_and_zero_only_at_equality(a in -30.0f64..0.0, b in -30.0f64..0.0) {
        for o in [KlRatio::RefOverTheta, KlRatio::ThetaOverRef] {
            let v = kl_k3_with(o, a, b);
            prop_assert!(v >= 0.0);
            if a == b {
                prop_assert_eq!(v, 0.0);
            } else if (a - b).abs() > 1e-6 {
                prop_assert!(v > 0.0);
            }
        }
        prop_assert_eq!(kl_k3(a, a), 0.0);
    }

    #[test]
    fn clipped_objective_is_bounded(r in 0.01f64..5.0, adv in -5.0f64..5.0, eps in 0.01f64..0.99) {
        let v = clipped_objective(r, adv, eps);
        prop_assert!(v.abs() <= (r * adv).abs().max((1.0 + eps) * adv.abs()) + 1e-12);
        if adv > 0.0 {
            prop_assert!(v <= r * adv + 1e-12);
        }
    }

    #[test]
    fn joint_score_never_exceeds_sta_or_fl(
        raw in prop::collection::vec((0u8..2, -1.0f64..1.0, 0u8..2, any::<bool>()), 1..40)
    ) {
        let samples: Vec<SampleScore> = raw
            .iter()
            .map(|&(sta, sim, fl, refused)| {
                if refused {
                    SampleScore { sta: 0, sim: 0.0, fl: 0, refused }
                } else {
                    SampleScore { sta, sim, fl, refused }
                }
            })
            .collect();
        let r = EvalReport::from_samples(samples.clone());
        prop_assert!(r.j <= r.sta + 1e-9);
        let answered = samples.iter().filter(|s| !s.refused).count();
        // FL averages over answered samples only, so compare on the same base.
        if answered > 0 {
            prop_assert!(r.j * r.n_total as f64 <= r.fl * answered as f64 + 1e-9);
        }
        let j: f64 = samples
            .iter()
            .map(|s| f64::from(s.sta) * s.sim.max(0.0) * f64::from(s.fl))
            .sum::<f64>()
            * 100.0
            / samples.len() as f64;
        prop_assert!((r.j - j).abs() < 1e-9);
        prop_assert_eq!(r.n_refusals, samples.iter().filter(|s| s.refused).count());
    }

    #[test]
    fn softmax_rows_normalize(logits in prop::collection::vec(-50.0f64..50.0, 2..30)) {
        let mut v = logits;
        log_softmax_in_place(&mut v);
        let total: f64 = v.iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gold_rewrites_are_clean_and_length_preserving(seed in 0u64..1000) {
        let cfg = CorpusConfig { num_pairs: 100, seed, ..Default::default() };
        let v = build_vocab(&cfg).unwrap();
        let g = build_grammar(&cfg).unwrap();
        for p in generate_corpus(&v, &g, &cfg).unwrap() {
            prop_assert!(v.count_toxic(&p.toxic) >= 1);
            if !p.is_drift {
                prop_assert_eq!(v.count_toxic(&p.reference), 0);
                prop_assert_eq!(p.reference.len(), p.toxic.len());
            }
        }
    }

    #[test]
    fn first_step_has_unit_ratios_and_zero_penalty(seed in 0u64..1000) {
        let dims = PolicyDims { vocab: 12, embed: 8, hidden: 12 };
        let p = init_params(seed, dims).unwrap();
        let net = Network::new(&p, None).unwrap();
        let records = net
            .sample(&[0, 5, 6, 1], 4, detox_core::policy::Decoding::Sample { temperature: 2.0 }, 6, seed)
            .unwrap();
        let ref_lp: Vec<Vec<f64>> = records.iter().map(|r| net.logprobs(&r.prompt, &r.completion).unwrap()).collect();
        for (r, lp) in records.iter().zip(&ref_lp) {
            for (a, b) in r.logprobs.iter().zip(lp) {
                prop_assert_eq!((a - b).exp(), 1.0);
                prop_assert_eq!(kl_k3(*a, *b), 0.0);
            }
        }
        let rewards = (0..4).map(|j| RewardBreakdown::new(0.5, j as f64 * 0.1, 5.0)).collect();
        let g = GroupSample::new(Sentence::new(vec![5, 6]), records, ref_lp, rewards).unwrap();
        let out = grpo_loss(&g, 0.04, 0.2, KlRatio::RefOverTheta);
        prop_assert_eq!(out.mean_kl, 0.0);
    }
}

#[test]
fn zero_length_completions_are_flagged() {
    let rec = |completion: Vec<u32>| SequenceRecord {
        prompt: vec![0, 1],
        logprobs: vec![-1.0; completion.len()],
        completion,
    };
    let g = GroupSample::new(
        Sentence::new(vec![3]),
        vec![rec(vec![]), rec(vec![2])],
        vec![vec![], vec![-1.0]],
        vec![RewardBreakdown::new(0.0, 0.0, 1.0), RewardBreakdown::new(1.0, 0.0, 1.0)],
    )
    .unwrap();
    let out = grpo_loss(&g, 0.04, 0.2, KlRatio::RefOverTheta);
    assert_eq!(out.flagged, vec![0]);
    assert!(out.token_weights[0].is_empty());
    // Only the second completion contributes: -(1/2) * A_2 with A_2 = 1/sqrt(2).
    assert!((out.loss + 0.5 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
}
