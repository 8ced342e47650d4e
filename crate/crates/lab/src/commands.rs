use std::path::{Path, PathBuf};

use intactkv_core::bound::{theorem1_bound, with_lossless_pivots, BoundInstance};
use intactkv_core::calibration::{calibrate, CalibConfig, CalibSample};
use intactkv_core::experiment::{sweep_kv_size, PrefixMode, Setting};
use intactkv_core::intactkv::{attach_and_prefill_with, IntactKv};
use intactkv_core::metrics::sequence_nll;
use intactkv_core::model::{forward, forward_with, init_random, inject_attention_sink, KvQuant, ModelWeights, RunOptions};
use intactkv_core::pivot::{attention_mass, pivot_report, token_activation_stats};
use intactkv_core::quantizer::{quantize_model_weights, QuantConfig};
use intactkv_core::recipe::{self, synthetic_corpus, BOS, CANONICAL_SEED, SINK_CHANNELS, SINK_SCALE};
use intactkv_core::rng::derive_seed;

use crate::cli::{Cli, Command, KvQuantArgs, Recipe, WeightQuant};
use crate::corpus::{check_vocab, load_corpus, save_corpus, CorpusLine};
use crate::error::{LabError, LabResult};
use crate::format::{load_intactkv, load_model, save_intactkv, save_model};
use crate::io::{real, sibling, Table};

pub fn run(cli: &Cli) -> LabResult<()> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| LabError::Usage("--out is required".into()))?;
    let seed = cli.seed;
    match &cli.command {
        Command::InitModel { recipe } => init_model(out, *recipe, seed.unwrap_or(CANONICAL_SEED)),
        Command::MakeCorpus {
            model,
            sequences,
            length,
            prompt_len,
        } => {
            let w = load_model(model)?;
            let seqs = synthetic_corpus(&w, *sequences, *length, *prompt_len, seed.unwrap_or(0))?;
            save_corpus(out, &seqs)
        }
        Command::Analyze {
            model,
            corpus,
            sequence,
            layer,
            act_ratio,
            mass_ratio,
        } => analyze(out, model, corpus, *sequence, *layer, *act_ratio, *mass_ratio),
        Command::Quantize { model, quant } => quantize(out, model, quant),
        Command::GenerateKv {
            model,
            prefix,
            corpus,
            prefix_len,
        } => generate_kv(out, model, prefix.as_deref(), corpus.as_deref(), *prefix_len),
        Command::Calibrate {
            model,
            quant,
            corpus,
            prefix_len,
            lr,
            epochs,
            batch,
            grad_accum,
            weight_decay,
            grad_check_coords,
        } => {
            let cfg = CalibConfig {
                learning_rate: *lr,
                epochs: *epochs,
                batch: *batch,
                grad_accum: *grad_accum,
                weight_decay: *weight_decay,
                seed: seed.unwrap_or(0),
                grad_check_coords: *grad_check_coords,
                ..CalibConfig::default()
            };
            run_calibrate(out, model, quant, corpus, *prefix_len, &cfg)
        }
        Command::SweepKvSize {
            model,
            corpus,
            quant,
            kv,
            m_max,
            n_sequences,
        } => sweep(out, model, corpus, quant, kv, *m_max, *n_sequences, seed.unwrap_or(0)),
        Command::EvalPpl {
            model,
            corpus,
            quant,
            kv,
            intactkv_len,
            kv_file,
            bos,
            score_from,
            dataset,
        } => eval_ppl(
            out,
            model,
            corpus,
            quant,
            kv,
            *intactkv_len,
            kv_file.as_deref(),
            *bos,
            *score_from,
            dataset.as_deref(),
        ),
        Command::VerifyBound {
            n,
            d,
            delta,
            trials,
            pivot_count,
        } => verify_bound(out, *n, *d, *delta, *trials, *pivot_count, seed.unwrap_or(0)),
    }
}

fn init_model(out: &Path, recipe: Recipe, seed: u64) -> LabResult<()> {
    let w = match recipe {
        Recipe::Canonical => init_random(&recipe::canonical_config(), seed)?,
        Recipe::Sink => inject_attention_sink(
            &init_random(&recipe::canonical_config(), seed)?,
            BOS,
            &SINK_CHANNELS,
            SINK_SCALE,
        )?,
        Recipe::Micro => init_random(&recipe::micro_config(), seed)?,
    };
    save_model(out, &w)
}

fn weight_cfg(q: &WeightQuant) -> LabResult<Option<QuantConfig>> {
    q.bits
        .map(|bits| {
            let cfg = QuantConfig {
                bits,
                group_size: q.group_size,
                symmetric: q.symmetric,
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .transpose()
}

fn require_bits(q: &WeightQuant) -> LabResult<QuantConfig> {
    weight_cfg(q)?.ok_or_else(|| LabError::Usage("--bits is required".into()))
}

fn kv_quant(kv: &KvQuantArgs, default_keep: usize) -> LabResult<Option<KvQuant>> {
    match kv.kv_bits {
        None => {
            if kv.keep_prefix_fp.is_some() {
                return Err(LabError::Usage("--keep-prefix-fp needs --kv-bits".into()));
            }
            Ok(None)
        }
        Some(bits) => Ok(Some(KvQuant {
            cfg: QuantConfig::new(bits, 1)?,
            keep_prefix_fp: kv.keep_prefix_fp.unwrap_or(default_keep),
        })),
    }
}

fn load_checked_corpus(path: &Path, w: &ModelWeights) -> LabResult<Vec<CorpusLine>> {
    let lines = load_corpus(path)?;
    check_vocab(path, &lines, w.config.vocab_size)?;
    Ok(lines)
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

fn analyze(
    out: &Path,
    model: &Path,
    corpus: &Path,
    sequence: usize,
    layer: Option<usize>,
    act_ratio: f64,
    mass_ratio: f64,
) -> LabResult<()> {
    let w = load_model(model)?;
    let lines = load_checked_corpus(corpus, &w)?;
    let tokens = &lines
        .get(sequence)
        .ok_or_else(|| LabError::Usage(format!("corpus has {} sequences, asked for #{sequence}", lines.len())))?
        .tokens;
    let trace = forward(&w, tokens)?;
    let layer = layer.unwrap_or(w.config.n_layers - 1);
    let report = pivot_report(&trace, tokens, layer, act_ratio, mass_ratio)?;

    let mut pivots = Table::new(&["position", "token_id", "max_abs_activation", "attn_mass", "is_pivot"]);
    for r in &report.rows {
        pivots.push(vec![
            r.position.to_string(),
            r.token_id.to_string(),
            real(r.max_abs_activation),
            real(r.attn_mass),
            flag(r.is_pivot),
        ]);
    }
    let mut mass = Table::new(&["layer", "position", "token_id", "attn_mass", "max_abs_activation"]);
    for l in 0..w.config.n_layers {
        let m = attention_mass(&trace, l)?;
        let a = token_activation_stats(&trace, l)?;
        for (p, (&mv, &av)) in m.iter().zip(&a).enumerate() {
            mass.push(vec![l.to_string(), p.to_string(), tokens[p].to_string(), real(mv), real(av)]);
        }
    }
    pivots.write(out)?;
    mass.write(&sibling(out, "mass.csv"))
}

fn quantize(out: &Path, model: &Path, quant: &WeightQuant) -> LabResult<()> {
    let w = load_model(model)?;
    let cfg = require_bits(quant)?;
    let q = quantize_model_weights(&w, &cfg)?;
    let mut t = Table::new(&["tensor", "rows", "cols", "max_abs_error", "mse"]);
    let mut row = |name: String, a: &intactkv_core::Matrix, b: &intactkv_core::Matrix| {
        let diff = a.sub(b).expect("same shape");
        t.push(vec![
            name,
            a.rows().to_string(),
            a.cols().to_string(),
            real(diff.max_abs()),
            real(diff.sum_sq() / diff.data().len() as f64),
        ]);
    };
    for (i, (lw, lq)) in w.layers.iter().zip(&q.layers).enumerate() {
        for (name, a, b) in [
            ("wq", &lw.wq, &lq.wq),
            ("wk", &lw.wk, &lq.wk),
            ("wv", &lw.wv, &lq.wv),
            ("wo", &lw.wo, &lq.wo),
            ("w_gate", &lw.w_gate, &lq.w_gate),
            ("w_up", &lw.w_up, &lq.w_up),
            ("w_down", &lw.w_down, &lq.w_down),
        ] {
            row(format!("layer{i}.{name}"), a, b);
        }
    }
    row("output".into(), &w.output, &q.output);
    save_model(out, &q)?;
    t.write(&sibling(out, "csv"))
}

fn parse_ids(s: &str) -> LabResult<Vec<u32>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| LabError::Usage(format!("bad token id {t:?} in --prefix"))))
        .collect()
}

fn generate_kv(
    out: &Path,
    model: &Path,
    prefix: Option<&str>,
    corpus: Option<&Path>,
    prefix_len: Option<usize>,
) -> LabResult<()> {
    let w = load_model(model)?;
    let tokens = match (prefix, corpus, prefix_len) {
        (Some(p), _, _) => parse_ids(p)?,
        (None, Some(c), Some(m)) => {
            let lines = load_checked_corpus(c, &w)?;
            let first = &lines[0].tokens;
            if m > first.len() {
                return Err(LabError::Usage(format!(
                    "--prefix-len {m} exceeds the first sequence ({} tokens)",
                    first.len()
                )));
            }
            first[..m].to_vec()
        }
        _ => return Err(LabError::Usage("give --prefix or --corpus with --prefix-len".into())),
    };
    let kv = IntactKv::generate(&w, &tokens)?;
    let mut t = Table::new(&["layer", "head", "k_absmax", "v_absmax"]);
    for l in 0..w.config.n_layers {
        for h in 0..w.config.n_heads {
            t.push(vec![
                l.to_string(),
                h.to_string(),
                real(kv.cache().keys(l, h).max_abs()),
                real(kv.cache().values(l, h).max_abs()),
            ]);
        }
    }
    save_intactkv(out, &kv)?;
    t.write(&sibling(out, "csv"))
}

fn run_calibrate(
    out: &Path,
    model: &Path,
    quant: &WeightQuant,
    corpus: &Path,
    prefix_len: usize,
    cfg: &CalibConfig,
) -> LabResult<()> {
    let fp = load_model(model)?;
    let q = quantize_model_weights(&fp, &require_bits(quant)?)?;
    let lines = load_checked_corpus(corpus, &fp)?;
    let first = &lines[0].tokens;
    if prefix_len == 0 || prefix_len >= first.len() {
        return Err(LabError::Usage(format!(
            "--prefix-len must be in 1..{} for this corpus",
            first.len()
        )));
    }
    let theta = IntactKv::generate(&fp, &first[..prefix_len])?;
    let samples: Vec<CalibSample> = lines
        .iter()
        .map(|l| CalibSample {
            tokens: l.tokens.clone(),
            loss_start: l.offset.unwrap_or(0),
        })
        .collect();
    let (kv, rep) = calibrate(&fp, &q, &theta, &samples, cfg)?;

    let mut steps = Table::new(&["step", "loss"]);
    for (i, l) in rep.step_losses.iter().enumerate() {
        steps.push(vec![(i + 1).to_string(), real(*l)]);
    }
    let mut layers = Table::new(&["layer", "initial", "final"]);
    for (i, (a, b)) in rep.initial_layer_losses.iter().zip(&rep.final_layer_losses).enumerate() {
        layers.push(vec![i.to_string(), real(*a), real(*b)]);
    }
    layers.push(vec!["total".into(), real(rep.initial_loss), real(rep.final_loss)]);

    save_intactkv(out, &kv)?;
    steps.write(&sibling(out, "steps.csv"))?;
    layers.write(&sibling(out, "layers.csv"))?;
    println!(
        "loss {} -> {} after {} updates (best epoch {})",
        rep.initial_loss, rep.final_loss, rep.updates, rep.best_epoch
    );
    if let Some(e) = rep.grad_check_max_rel_error {
        println!("gradient check max relative error {e}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    out: &Path,
    model: &Path,
    corpus: &Path,
    quant: &WeightQuant,
    kv: &KvQuantArgs,
    m_max: usize,
    n_sequences: Option<usize>,
    seed: u64,
) -> LabResult<()> {
    let fp = load_model(model)?;
    let qcfg = require_bits(quant)?;
    let q = quantize_model_weights(&fp, &qcfg)?;
    let lines = load_checked_corpus(corpus, &fp)?;
    let n = n_sequences.unwrap_or(lines.len());
    if n == 0 || n > lines.len() {
        return Err(LabError::Usage(format!(
            "--n-sequences {n} outside 1..={}",
            lines.len()
        )));
    }
    let seqs: Vec<Vec<u32>> = lines[..n].iter().map(|l| l.tokens.clone()).collect();
    if let Some(short) = seqs.iter().map(Vec::len).min().filter(|&s| s <= m_max) {
        return Err(LabError::Usage(format!(
            "--m-max {m_max} must be below the shortest sequence length {short}"
        )));
    }
    let kv_bits = kv.kv_bits.map(|b| b.to_string()).unwrap_or_default();
    let mut t = Table::new(&[
        "m",
        "layer_mse",
        "attn_mse",
        "last_layer_mse",
        "eval_start",
        "n_sequences",
        "seed",
        "bits",
        "group_size",
        "kv_bits",
    ]);
    let rows = if kv.kv_bits.is_none() {
        let (eval_start, rows) = sweep_kv_size(&fp, &q, &seqs, m_max)?;
        rows.into_iter().map(|r| (r.m, r.error, eval_start)).collect::<Vec<_>>()
    } else {
        let eval_start = intactkv_core::experiment::common_prefix_len(&seqs).max(m_max);
        let mut rows = Vec::new();
        for m in 0..=m_max {
            let setting = Setting {
                prefix_len: m,
                prefix: if m == 0 { PrefixMode::Quantized } else { PrefixMode::Intact },
                kv_quant: kv_quant(kv, m)?,
            };
            let e = intactkv_core::experiment::evaluate(&fp, &q, &seqs, setting, eval_start)?;
            rows.push((m, e, eval_start));
        }
        rows
    };
    for (m, e, start) in rows {
        t.push(vec![
            m.to_string(),
            real(e.mean_layer()),
            real(e.mean_attn()),
            real(e.last_layer()),
            start.to_string(),
            n.to_string(),
            seed.to_string(),
            qcfg.bits.to_string(),
            qcfg.group_size.to_string(),
            kv_bits.clone(),
        ]);
    }
    t.write(out)
}

#[allow(clippy::too_many_arguments)]
fn eval_ppl(
    out: &Path,
    model: &Path,
    corpus: &Path,
    quant: &WeightQuant,
    kv: &KvQuantArgs,
    intactkv_len: Option<usize>,
    kv_file: Option<&Path>,
    bos: Option<u32>,
    score_from: usize,
    dataset: Option<&str>,
) -> LabResult<()> {
    let fp = load_model(model)?;
    let q = match weight_cfg(quant)? {
        Some(cfg) => quantize_model_weights(&fp, &cfg)?,
        None => fp.clone(),
    };
    let lines = load_checked_corpus(corpus, &fp)?;
    let loaded = kv_file.map(|p| load_intactkv(p, &fp.config)).transpose()?;
    let m = loaded.as_ref().map(IntactKv::prefix_len).or(intactkv_len).unwrap_or(0);
    if intactkv_len == Some(0) {
        return Err(LabError::Usage("--intactkv-len must be at least 1".into()));
    }
    if score_from < m {
        return Err(LabError::Usage(format!(
            "--score-from {score_from} must not precede the end of the {m}-token prefix"
        )));
    }
    let bos = bos.or(if m > 0 { Some(BOS) } else { None });
    let kvq = kv_quant(kv, m)?;
    if bos.is_some_and(|b| b as usize >= fp.config.vocab_size) {
        return Err(LabError::Usage("--bos outside the vocabulary".into()));
    }
    let name = dataset.map(str::to_string).unwrap_or_else(|| {
        corpus
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });

    let mut t = Table::new(&["dataset", "sequence", "n_tokens", "nll_sum", "ppl"]);
    let (mut total_nll, mut total_n) = (0.0, 0usize);
    for (i, line) in lines.iter().enumerate() {
        let mut tokens = line.tokens.clone();
        if let Some(b) = bos {
            tokens[0] = b;
        }
        if tokens.len() <= m.max(score_from) + 1 {
            return Err(LabError::Corpus {
                path: corpus.to_path_buf(),
                line: line.line,
                msg: format!("sequence too short to score from position {score_from}"),
            });
        }
        let nll = if m > 0 {
            let prefix = match &loaded {
                Some(kv) => {
                    if tokens[..m] != *kv.prefix_tokens() {
                        return Err(LabError::Corpus {
                            path: corpus.to_path_buf(),
                            line: line.line,
                            msg: "sequence does not start with the prefix tokens".into(),
                        });
                    }
                    kv.clone()
                }
                None => IntactKv::generate(&fp, &tokens[..m])?,
            };
            let trace = attach_and_prefill_with(&q, &prefix, &tokens[m..], kvq)?;
            sequence_nll(&trace.logits, &tokens, m, score_from - m)
        } else {
            let opts = RunOptions {
                prefix: None,
                kv_quant: kvq,
            };
            let trace = forward_with(&q, &tokens, opts)?;
            sequence_nll(&trace.logits, &tokens, 0, score_from)
        };
        let sum: f64 = nll.iter().sum();
        total_nll += sum;
        total_n += nll.len();
        t.push(vec![
            name.clone(),
            i.to_string(),
            nll.len().to_string(),
            real(sum),
            real((sum / nll.len() as f64).exp()),
        ]);
    }
    let ppl = (total_nll / total_n as f64).exp();
    t.push(vec![name, "all".into(), total_n.to_string(), real(total_nll), real(ppl)]);
    t.write(out)?;
    println!("perplexity {ppl} over {total_n} tokens");
    Ok(())
}

fn verify_bound(
    out: &Path,
    n: usize,
    d: usize,
    delta: f64,
    trials: usize,
    pivot_count: usize,
    seed: u64,
) -> LabResult<()> {
    let mut t = Table::new(&[
        "trial",
        "n",
        "d",
        "delta",
        "actual",
        "bound",
        "ratio",
        "C1",
        "C2",
        "C3",
        "seed",
        "pivot_count",
        "bound_intact",
    ]);
    let mut violations = 0usize;
    for trial in 0..trials {
        let s = derive_seed(seed, trial as u64);
        let inst = BoundInstance::random(n, d, delta, pivot_count, s)?;
        let r = theorem1_bound(&inst)?;
        let intact = theorem1_bound(&with_lossless_pivots(&inst)?)?;
        if !r.holds() || !intact.holds() || intact.bound > r.bound {
            violations += 1;
        }
        t.push(vec![
            trial.to_string(),
            n.to_string(),
            d.to_string(),
            real(delta),
            real(r.actual),
            real(r.bound),
            real(r.ratio),
            real(r.c1),
            real(r.c2),
            real(r.c3),
            s.to_string(),
            pivot_count.to_string(),
            real(intact.bound),
        ]);
    }
    t.write(out)?;
    if violations > 0 {
        return Err(LabError::Violation(format!("{violations} of {trials} trials broke the bound")));
    }
    println!("{trials} trials, no violations");
    Ok(())
}

/// Companion files written next to `out` by `command`, primary output first.
pub fn outputs(command: &Command, out: &Path) -> Vec<PathBuf> {
    let mut v = vec![out.to_path_buf()];
    match command {
        Command::Analyze { .. } => v.push(sibling(out, "mass.csv")),
        Command::Quantize { .. } | Command::GenerateKv { .. } => v.push(sibling(out, "csv")),
        Command::Calibrate { .. } => {
            v.push(sibling(out, "steps.csv"));
            v.push(sibling(out, "layers.csv"));
        }
        _ => {}
    }
    v
}
