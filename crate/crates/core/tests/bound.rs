use intactkv_core::bound::{intactkv_bound_gap, theorem1_bound, with_lossless_pivots, BoundInstance};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bound_dominates(seed in any::<u64>(), n in 1usize..24, d in prop::sample::select(vec![2usize, 4, 6, 8]), delta in 1e-4f64..3.0) {
        let inst = BoundInstance::random(n, d, delta, 0, seed).unwrap();
        let r = theorem1_bound(&inst).unwrap();
        prop_assert!(r.actual <= r.bound, "{} > {}", r.actual, r.bound);
        prop_assert!(r.c2 >= 0.0 && r.ratio <= 1.0);
    }

    #[test]
    fn larger_pivot_sets_never_loosen(seed in any::<u64>(), n in 2usize..16, delta in 0.01f64..1.0) {
        let mut prev = f64::INFINITY;
        for p in 1..=n {
            let inst = BoundInstance::random(n, 4, delta, p, seed).unwrap();
            let (with, without) = intactkv_bound_gap(&inst).unwrap();
            prop_assert!(with <= without);
            prop_assert!(with <= prev);
            prev = with;
        }
    }

    #[test]
    fn lossless_pivots_still_dominated(seed in any::<u64>(), n in 2usize..16, p in 1usize..16) {
        let p = p.min(n);
        let inst = with_lossless_pivots(&BoundInstance::random(n, 4, 0.5, p, seed).unwrap()).unwrap();
        let r = theorem1_bound(&inst).unwrap();
        prop_assert!(r.actual <= r.bound);
    }
}
