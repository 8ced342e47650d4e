use intactkv_core::model::forward;
use intactkv_core::pivot::{
    attention_mass, detect_pivots, detect_pivots_at, pivot_report, DEFAULT_ACT_RATIO, DEFAULT_MASS_RATIO,
};
use intactkv_core::recipe::{canonical_model, canonical_sink_model, system_prompt};
use proptest::prelude::*;

fn tokens() -> Vec<u32> {
    system_prompt(24, 256)
}

#[test]
fn sink_is_detected_at_position_zero() {
    let t = forward(&canonical_sink_model(), &tokens()).unwrap();
    let p = detect_pivots(&t, DEFAULT_ACT_RATIO, DEFAULT_MASS_RATIO).unwrap();
    assert_eq!(p, vec![0]);
    let r = pivot_report(&t, &tokens(), 3, DEFAULT_ACT_RATIO, DEFAULT_MASS_RATIO).unwrap();
    assert_eq!(r.rows.len(), 24);
    assert_eq!(r.rows[5].token_id, tokens()[5]);
    assert!(r.rows[0].is_pivot);
}

#[test]
fn plain_model_has_no_activation_pivots() {
    let t = forward(&canonical_model(), &tokens()).unwrap();
    assert!(detect_pivots(&t, DEFAULT_ACT_RATIO, f64::INFINITY).unwrap().is_empty());
}

#[test]
fn mass_is_a_distribution() {
    let t = forward(&canonical_sink_model(), &tokens()).unwrap();
    for l in 0..4 {
        let m = attention_mass(&t, l).unwrap();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(attention_mass(&t, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stricter_thresholds_never_add_pivots(a in 1.0f64..50.0, da in 0.0f64..50.0, m in 1.0f64..20.0, dm in 0.0f64..20.0, layer in 0usize..4) {
        let t = forward(&canonical_sink_model(), &tokens()).unwrap();
        let loose = detect_pivots_at(&t, layer, a, m).unwrap();
        let strict = detect_pivots_at(&t, layer, a + da, m + dm).unwrap();
        for (l, s) in loose.rows.iter().zip(&strict.rows) {
            prop_assert!(!s.is_pivot || l.is_pivot);
        }
    }
}
