use std::path::Path;
use std::process::{Command, Output};

use intactkv_core::experiment::{sweep_kv_size, evaluate, PrefixMode, Setting};
use intactkv_core::model::{init_random, ModelWeights};
use intactkv_core::numcore::Matrix;
use intactkv_core::quantizer::{quantize_model_weights, QuantConfig};
use intactkv_core::recipe::{canonical_sink_model, micro_config, synthetic_corpus};
use intactkv_lab::corpus::save_corpus;
use intactkv_lab::format::save_model;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intactkv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn intactkv")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'));
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn missing_input_is_exit_2_without_output() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["analyze", "--model", "nope.ikvm", "--corpus", "c.txt", "--out", "p.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("p.csv").exists());
}

#[test]
fn missing_out_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["verify-bound", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_model_is_exit_2() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("m.ikvm"), b"IKVMjunk").unwrap();
    let o = run(d.path(), &["quantize", "--model", "m.ikvm", "--bits", "4", "--out", "q.ikvm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("q.ikvm").exists());
}

#[test]
fn zero_trials_writes_header_only() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["verify-bound", "--trials", "0", "--out", "b.csv"]);
    let r = rows(&d.path().join("b.csv"));
    assert_eq!(r.len(), 1);
    assert_eq!(r[0][0], "trial");
}

#[test]
fn bound_rows_hold() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["verify-bound", "--trials", "50", "--n", "16", "--d", "8", "--delta", "1", "--out", "b.csv"]);
    let r = rows(&d.path().join("b.csv"));
    let col = |name: &str| r[0].iter().position(|h| h == name).unwrap();
    let (a, b) = (col("actual"), col("bound"));
    assert_eq!(r.len(), 51);
    for row in &r[1..] {
        assert!(row[a].parse::<f64>().unwrap() <= row[b].parse::<f64>().unwrap());
    }
}

#[test]
fn analyze_flags_the_sink_only_on_the_sink_recipe() {
    let d = tempfile::tempdir().unwrap();
    for recipe in ["sink", "canonical"] {
        let m = format!("{recipe}.ikvm");
        ok(d.path(), &["init-model", "--recipe", recipe, "--out", &m]);
        ok(d.path(), &["make-corpus", "--model", &m, "--sequences", "2", "--length", "24", "--out", "c.txt"]);
        ok(d.path(), &["analyze", "--model", &m, "--corpus", "c.txt", "--out", "p.csv"]);
        let r = rows(&d.path().join("p.csv"));
        let flag = r[0].iter().position(|h| h == "is_pivot").unwrap();
        let flagged: Vec<&str> = r[1..].iter().filter(|row| row[flag] == "1").map(|row| row[0].as_str()).collect();
        if recipe == "sink" {
            assert_eq!(flagged, ["0"]);
        } else {
            assert!(flagged.is_empty(), "{flagged:?}");
        }
    }
}

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let d = tempfile::tempdir().unwrap();
    let cfg = micro_config();
    let mut w: ModelWeights = init_random(&cfg, 5).unwrap();
    w.output = Matrix::zeros(w.output.rows(), w.output.cols());
    save_model(&d.path().join("z.ikvm"), &w).unwrap();
    save_corpus(&d.path().join("c.txt"), &[vec![0, 3, 4, 5, 9, 1], vec![0, 2, 2, 2]]).unwrap();
    ok(d.path(), &["eval-ppl", "--model", "z.ikvm", "--corpus", "c.txt", "--out", "ppl.csv"]);
    let r = rows(&d.path().join("ppl.csv"));
    let all = r.iter().find(|row| row[1] == "all").unwrap();
    let ppl: f64 = all[4].parse().unwrap();
    assert!((ppl - cfg.vocab_size as f64).abs() < 1e-9, "{ppl}");
}

#[test]
fn sweep_rows_match_library() {
    let d = tempfile::tempdir().unwrap();
    let fp = canonical_sink_model();
    let corpus = synthetic_corpus(&fp, 3, 16, 4, 1).unwrap();
    save_model(&d.path().join("m.ikvm"), &fp).unwrap();
    save_corpus(&d.path().join("c.txt"), &corpus).unwrap();
    ok(
        d.path(),
        &["sweep-kv-size", "--model", "m.ikvm", "--corpus", "c.txt", "--bits", "3", "--group-size", "16", "--m-max", "2", "--out", "s.csv"],
    );
    let q = quantize_model_weights(&fp, &QuantConfig::new(3, 16).unwrap()).unwrap();
    let (start, lib) = sweep_kv_size(&fp, &q, &corpus, 2).unwrap();
    let direct = evaluate(
        &fp,
        &q,
        &corpus,
        Setting {
            prefix_len: 0,
            prefix: PrefixMode::Quantized,
            kv_quant: None,
        },
        start,
    )
    .unwrap();
    assert_eq!(lib[0].error, direct);

    let r = rows(&d.path().join("s.csv"));
    assert_eq!(r.len(), 4);
    for (row, want) in r[1..].iter().zip(&lib) {
        assert_eq!(row[0], want.m.to_string());
        assert_eq!(row[1].parse::<f64>().unwrap(), want.error.mean_layer());
        assert_eq!(row[4], start.to_string());
    }
}

#[test]
fn oversized_sweep_prefix_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["init-model", "--recipe", "micro", "--out", "m.ikvm"]);
    save_corpus(&d.path().join("c.txt"), &[vec![0, 1, 2]]).unwrap();
    let o = run(d.path(), &["sweep-kv-size", "--model", "m.ikvm", "--corpus", "c.txt", "--bits", "3", "--group-size", "4", "--m-max", "5", "--out", "s.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("s.csv").exists());
}

#[test]
fn eval_ppl_rejects_mismatched_prefix_file() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["init-model", "--recipe", "micro", "--out", "m.ikvm"]);
    save_corpus(&d.path().join("c.txt"), &[vec![0, 1, 2, 3, 4, 5], vec![0, 7, 2, 3, 4, 5]]).unwrap();
    ok(d.path(), &["generate-kv", "--model", "m.ikvm", "--prefix", "0,1", "--out", "kv.ikvp"]);
    let o = run(d.path(), &["eval-ppl", "--model", "m.ikvm", "--corpus", "c.txt", "--kv", "kv.ikvp", "--score-from", "2", "--out", "p.csv"]);
    assert_eq!(o.status.code(), Some(2));
}
