use intactkv_core::experiment::{evaluate, PrefixMode, Setting};
use intactkv_core::intactkv::{
    assemble_mixed_kv, attach_and_prefill, attach_and_prefill_with, quantize_intactkv, IntactKv, Provenance,
};
use intactkv_core::model::{forward, forward_with, KvQuant, RunOptions};
use intactkv_core::quantizer::{quantize_kv_dynamic, QuantConfig};
use intactkv_core::recipe::{canonical_model, canonical_quantized, canonical_sink_model, synthetic_corpus};
use intactkv_core::Error;

const TOKENS: [u32; 12] = [0, 17, 3, 99, 250, 4, 8, 15, 16, 23, 42, 7];

#[test]
fn generated_prefix_equals_fp_slice_bitwise() {
    let w = canonical_sink_model();
    let full = forward(&w, &TOKENS).unwrap();
    for m in [1, 4, 12] {
        let kv = IntactKv::generate(&w, &TOKENS[..m]).unwrap();
        assert_eq!(kv.provenance(), Provenance::Lossless);
        assert_eq!(kv.prefix_tokens(), &TOKENS[..m]);
        assert_eq!(kv.cache(), &full.cache.prefix(m).unwrap());
    }
}

#[test]
fn empty_prefix_rejected() {
    assert!(matches!(IntactKv::generate(&canonical_model(), &[]), Err(Error::Input(_))));
}

#[test]
fn attach_with_fp_weights_reproduces_forward() {
    let w = canonical_sink_model();
    let full = forward(&w, &TOKENS).unwrap();
    let kv = IntactKv::generate(&w, &TOKENS[..3]).unwrap();
    let t = attach_and_prefill(&w, &kv, &TOKENS[3..]).unwrap();
    for i in 0..9 {
        for (a, b) in t.logits.row(i).iter().zip(full.logits.row(i + 3)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert_eq!(t.cache.prefix(3).unwrap(), *kv.cache());
}

#[test]
fn prefix_survives_kv_quantization_bitwise() {
    let w = canonical_sink_model();
    let kv = IntactKv::generate(&w, &TOKENS[..4]).unwrap();
    let kq = KvQuant {
        cfg: QuantConfig::new(3, 1).unwrap(),
        keep_prefix_fp: 4,
    };
    let t = attach_and_prefill_with(&w, &kv, &TOKENS[4..], Some(kq)).unwrap();
    assert_eq!(t.cache.prefix(4).unwrap(), *kv.cache());
    let plain = forward(&w, &TOKENS).unwrap();
    assert_ne!(t.cache, plain.cache);
}

#[test]
fn in_forward_kv_quant_matches_post_hoc_quantization() {
    let w = canonical_model();
    let cfg = QuantConfig::new(4, 1).unwrap();
    let t = forward_with(
        &w,
        &TOKENS,
        RunOptions {
            prefix: None,
            kv_quant: Some(KvQuant { cfg, keep_prefix_fp: 2 }),
        },
    )
    .unwrap();
    // Layer 0 keys depend only on embeddings, so they agree exactly.
    let fp = forward(&w, &TOKENS).unwrap();
    let post = quantize_kv_dynamic(&fp.cache, &cfg, 2).unwrap();
    for h in 0..4 {
        assert_eq!(t.cache.keys(0, h), post.keys(0, h));
    }
}

#[test]
fn quantized_prefix_and_mixed_assembly() {
    let w = canonical_sink_model();
    let kv = IntactKv::generate(&w, &TOKENS[..3]).unwrap();
    let q8 = quantize_intactkv(&kv, &QuantConfig::new(8, 1).unwrap()).unwrap();
    assert_eq!(q8.provenance(), Provenance::Quantized);
    assert_ne!(q8.cache(), kv.cache());
    let full = forward(&w, &TOKENS).unwrap().cache;
    let low = quantize_kv_dynamic(&full, &QuantConfig::new(2, 1).unwrap(), 0).unwrap();
    let mixed = assemble_mixed_kv(&low, &kv).unwrap();
    assert_eq!(mixed.prefix(3).unwrap(), *kv.cache());
    assert_eq!(mixed.keys(2, 1).row(5), low.keys(2, 1).row(5));
    let long = IntactKv::generate(&w, &TOKENS).unwrap();
    let short = forward(&w, &TOKENS[..5]).unwrap().cache;
    assert!(matches!(assemble_mixed_kv(&short, &long), Err(Error::Index { .. })));
}

#[test]
fn flatten_round_trip_and_storage() {
    let w = canonical_model();
    let mut kv = IntactKv::generate(&w, &TOKENS[..2]).unwrap();
    let flat = kv.flatten();
    assert_eq!(flat.len(), kv.element_count());
    assert_eq!(flat.len(), 2 * 4 * 2 * 64);
    let copy = kv.clone();
    let shifted: Vec<f64> = flat.iter().map(|x| x + 1.0).collect();
    kv.assign_flat(&shifted).unwrap();
    assert_ne!(kv, copy);
    kv.assign_flat(&flat).unwrap();
    assert_eq!(kv, copy);
    assert!(kv.assign_flat(&flat[1..]).is_err());
    let ratio = kv.storage_ratio(&w);
    assert!(ratio > 0.0 && ratio < 0.01);
}

#[test]
fn lossless_prefix_beats_quantized_model_prefix() {
    let fp = canonical_sink_model();
    let q = canonical_quantized(3, 16).unwrap();
    let corpus = synthetic_corpus(&fp, 6, 20, 4, 5).unwrap();
    let run = |prefix| {
        evaluate(
            &fp,
            &q,
            &corpus,
            Setting {
                prefix_len: 4,
                prefix,
                kv_quant: None,
            },
            4,
        )
        .unwrap()
        .mean_layer()
    };
    assert!(run(PrefixMode::Intact) < run(PrefixMode::Quantized));
}
