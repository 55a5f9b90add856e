use fipo_core::advantage::{group_advantage, mean_std};
use fipo_core::config::RunConfig;
use fipo_core::future_kl::{
    credit_tensors, future_kl_chunked, future_kl_chunked_batch, future_kl_naive, gamma_from_tau, influence_weight,
    FutureKlConfig, INFINITE_HORIZON,
};
use fipo_core::objective::{dapo_loss, fipo_loss, grpo_loss, ClipConfig, SequenceInputs};
use fipo_core::policy::PolicyParams;
use fipo_core::rollout::{dynamic_sample, GroupStream};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tau() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), Just(8.0), Just(32.0), Just(256.0), Just(INFINITE_HORIZON), 0.5f64..500.0]
}

fn sequence(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1..=max_len).prop_flat_map(|n| {
        (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(prop::bool::weighted(0.9), n),
        )
    })
}

/// A batch of responses: (current log-probs, old log-probs, advantage).
fn responses() -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>, f64)>> {
    prop::collection::vec(
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-6.0f64..-0.01, n),
                prop::collection::vec(-1.5f64..1.5, n),
                -2.0f64..2.0,
            )
                .prop_map(|(old, shift, adv)| {
                    let cur = old.iter().zip(&shift).map(|(o, s)| o + s).collect();
                    (cur, old, adv)
                })
        }),
        1..6,
    )
}

fn inputs(batch: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<SequenceInputs<'_>> {
    batch
        .iter()
        .map(|(c, o, a)| SequenceInputs {
            current_lp: c,
            old_lp: o,
            advantage: *a,
        })
        .collect()
}

proptest! {
    #[test]
    fn recursion_holds_for_both_kernels((delta, mask) in sequence(300), tau in tau(), chunk in 1usize..80) {
        let gamma = gamma_from_tau(tau);
        let naive = future_kl_naive(&delta, &mask, gamma).unwrap();
        let chunked = future_kl_chunked(&delta, &mask, gamma, chunk).unwrap();
        let n = delta.len();
        for f in [&naive, &chunked] {
            for t in 0..n {
                let m = if mask[t] { delta[t] } else { 0.0 };
                let next = if t + 1 < n { f[t + 1] } else { 0.0 };
                prop_assert!((f[t] - (m + gamma * next)).abs() <= 1e-12 * (1.0 + f[t].abs()));
            }
        }
    }

    #[test]
    fn batch_kernel_matches_naive_per_row(rows in prop::collection::vec(sequence(120), 1..6), tau in tau(), chunk in 1usize..64) {
        let gamma = gamma_from_tau(tau);
        let len = rows.iter().map(|r| r.0.len()).max().unwrap();
        let mut d = vec![0.0; rows.len() * len];
        let mut m = vec![false; rows.len() * len];
        for (b, (delta, mask)) in rows.iter().enumerate() {
            d[b * len..b * len + delta.len()].copy_from_slice(delta);
            m[b * len..b * len + mask.len()].copy_from_slice(mask);
        }
        let got = future_kl_chunked_batch(&d, &m, rows.len(), len, gamma, chunk).unwrap();
        for (b, (delta, mask)) in rows.iter().enumerate() {
            let want = future_kl_naive(delta, mask, gamma).unwrap();
            for (t, w) in want.iter().enumerate() {
                prop_assert!((got[b * len + t] - w).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn influence_weight_stays_in_its_interval(
        fkl in prop::collection::vec(-5.0f64..5.0, 1..50),
        lo in 0.0f64..=1.0,
        hi in 1.0001f64..3.0,
        adv in -2.0f64..2.0,
        log_ratio in -4.0f64..4.0,
    ) {
        let cfg = FutureKlConfig { f_clip: [lo, hi], ..FutureKlConfig::default() };
        let n = fkl.len();
        let ratio = vec![log_ratio.exp(); n];
        let w = influence_weight(&fkl, &vec![adv; n], &ratio, &cfg).unwrap();
        for t in 0..n {
            prop_assert!(w.weight[t] >= lo && w.weight[t] <= hi);
            let must_reset = adv < 0.0 && ratio[t] > cfg.safety_threshold;
            prop_assert_eq!(w.reset[t], must_reset);
            if must_reset {
                prop_assert_eq!(w.weight[t], 1.0);
            }
        }
    }

    #[test]
    fn clip_fractions_are_fractions(batch in responses()) {
        let seqs = inputs(&batch);
        let clip = ClipConfig::default();
        let fcfg = FutureKlConfig::default();
        let cur: Vec<&[f64]> = batch.iter().map(|b| b.0.as_slice()).collect();
        let old: Vec<&[f64]> = batch.iter().map(|b| b.1.as_slice()).collect();
        let adv: Vec<f64> = batch.iter().map(|b| b.2).collect();
        let credits = credit_tensors(&cur, &old, &adv, &fcfg).unwrap();
        let reports = [
            fipo_loss(&seqs, &credits, &clip, &fcfg).unwrap().report,
            dapo_loss(&seqs, &clip).unwrap().report,
            grpo_loss(&seqs, None, &clip).unwrap().report,
        ];
        for r in reports {
            prop_assert!(r.loss.is_finite());
            prop_assert!((0.0..=1.0).contains(&r.policy_clip_fraction));
            prop_assert!((0.0..=1.0).contains(&r.low_clip_fraction));
            if let Some(i) = r.influence {
                prop_assert!((0.0..=1.0).contains(&i.clip_fraction));
            }
        }
    }

    #[test]
    fn fipo_reduces_to_dapo_when_nothing_moved(batch in responses(), tau in tau()) {
        let same: Vec<_> = batch.iter().map(|(_, o, a)| (o.clone(), o.clone(), *a)).collect();
        let seqs = inputs(&same);
        let fcfg = FutureKlConfig { tau, ..FutureKlConfig::default() };
        let clip = ClipConfig::default();
        let lp: Vec<&[f64]> = same.iter().map(|b| b.0.as_slice()).collect();
        let adv: Vec<f64> = same.iter().map(|b| b.2).collect();
        let credits = credit_tensors(&lp, &lp, &adv, &fcfg).unwrap();
        for c in &credits {
            prop_assert!(c.future_kl.iter().all(|&v| v == 0.0));
            prop_assert!(c.weight.iter().all(|&v| v == 1.0));
        }
        let f = fipo_loss(&seqs, &credits, &clip, &fcfg).unwrap();
        let d = dapo_loss(&seqs, &clip).unwrap();
        prop_assert!((f.report.loss - d.report.loss).abs() <= 1e-12);
        for (a, b) in f.grad_lp.iter().flatten().zip(d.grad_lp.iter().flatten()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn group_advantages_are_standardised(rewards in prop::collection::vec(-3.0f64..3.0, 2..32)) {
        let (_, sd) = mean_std(&rewards);
        prop_assume!(sd > 1e-6);
        let a = group_advantage(&rewards).unwrap();
        let (m, s) = mean_std(&a);
        prop_assert!(m.abs() <= 1e-9);
        prop_assert!((s - 1.0).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kept_groups_have_reward_variance(seed in any::<u64>(), group_size in 2usize..10) {
        let cfg = RunConfig::default();
        let params = PolicyParams::init(cfg.policy, &mut ChaCha8Rng::seed_from_u64(seed));
        let stream = GroupStream::new(
            &params,
            cfg.env.sampler(),
            group_size,
            cfg.generation(),
            cfg.env.reward(),
            seed,
            8,
        );
        let batch = dynamic_sample(stream, 8, 400).unwrap();
        prop_assert_eq!(batch.groups.len(), 8);
        for g in &batch.groups {
            let raw: Vec<f64> = g.trajectories.iter().map(|t| f64::from(t.raw_reward)).collect();
            prop_assert!(mean_std(&raw).1 > 0.0);
            let (m, s) = mean_std(&g.advantages);
            prop_assert!(m.abs() <= 1e-9 && (s - 1.0).abs() <= 1e-9);
        }
    }
}
