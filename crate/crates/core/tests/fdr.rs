use perturbdag_core::fdr::{OnlineFdrState, SpendingSequence};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spending() -> impl Strategy<Value = SpendingSequence> {
    prop_oneof![Just(SpendingSequence::InverseSquare), (0.05f64..0.95).prop_map(|ratio| SpendingSequence::Geometric { ratio })]
}

fn batches() -> impl Strategy<Value = Vec<Vec<f64>>> {
    let p = prop_oneof![3 => 0.0f64..=1.0, 1 => 0.0f64..1e-4];
    prop::collection::vec(prop::collection::vec(p, 0..8), 1..15)
}

fn run(alpha: f64, spending: SpendingSequence, stream: &[Vec<f64>]) -> (OnlineFdrState, Vec<(Vec<bool>, f64)>) {
    let mut s = OnlineFdrState::new(alpha, spending).unwrap();
    let out = stream
        .iter()
        .map(|b| {
            let d = s.next_batch(None, b).unwrap();
            (d.rejected, d.alpha_used)
        })
        .collect();
    (s, out)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn identical_streams_give_identical_decisions(alpha in 0.01f64..0.5, sp in spending(), stream in batches()) {
        let (s1, o1) = run(alpha, sp, &stream);
        let (s2, o2) = run(alpha, sp, &stream);
        prop_assert_eq!(&o1, &o2);
        prop_assert_eq!(s1.replay_mismatch(), None);
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn levels_are_positive(alpha in 0.01f64..0.5, sp in spending(), stream in batches()) {
        let (_, out) = run(alpha, sp, &stream);
        for ((_, a), b) in out.iter().zip(&stream) {
            if !b.is_empty() {
                prop_assert!(*a > 0.0);
            }
        }
    }

    #[test]
    fn rejection_free_streams_stay_within_budget(
        alpha in 0.01f64..0.5,
        sp in spending(),
        sizes in prop::collection::vec(1usize..20, 1..60),
    ) {
        let mut s = OnlineFdrState::new(alpha, sp).unwrap();
        let mut total = 0.0;
        for m in sizes {
            let d = s.next_batch(None, &vec![1.0; m]).unwrap();
            total += d.alpha_used;
        }
        prop_assert!(total <= alpha * (1.0 + 1e-12));
    }

    #[test]
    fn an_extra_rejection_never_lowers_the_next_level(
        alpha in 0.01f64..0.5,
        sp in spending(),
        stream in batches(),
        which in any::<prop::sample::Index>(),
        pos in any::<prop::sample::Index>(),
        next_size in 1usize..10,
    ) {
        let t = which.index(stream.len());
        prop_assume!(!stream[t].is_empty());
        let (base, out) = run(alpha, sp, &stream[..=t]);
        let i = pos.index(stream[t].len());
        prop_assume!(!out[t].0[i]);
        // Setting one non-rejected p-value of batch t to zero adds a rejection.
        let mut boosted = stream[..=t].to_vec();
        boosted[t][i] = 0.0;
        let (more, out2) = run(alpha, sp, &boosted);
        let gained = out2[t].0.iter().filter(|r| **r).count() > out[t].0.iter().filter(|r| **r).count();
        prop_assume!(gained);
        prop_assert!(more.next_alpha(next_size) >= base.next_alpha(next_size) - 1e-15);
    }
}

#[test]
fn null_streams_keep_fdr_near_alpha() {
    let alpha = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let streams = 500;
    let mut fdp_sum = 0.0;
    for _ in 0..streams {
        let mut s = OnlineFdrState::new(alpha, SpendingSequence::default()).unwrap();
        let mut any = false;
        for _ in 0..50 {
            let batch: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            any |= s.next_batch(None, &batch).unwrap().rejected.iter().any(|r| *r);
        }
        // Every rejection is false, so the FDP is 1 whenever anything is rejected.
        if any {
            fdp_sum += 1.0;
        }
    }
    let fdr = fdp_sum / streams as f64;
    assert!(fdr <= alpha + 0.02, "empirical FDR {fdr}");
}
