//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use emograce::corpus::{build_corpus, load_annotations, load_corpus, merge_spans, split_corpus, LabeledSpan};
use emograce::eval::{evaluate, joint_prf, mean, span_prf};
use emograce::hpo::{averaged_performance, ScoreVector};
use emograce::io::{write_json, write_jsonl};
use emograce::losses::{adversary, cross_entropy, ghl_loss, vat_loss, GhlState, VatBranches, VatConfig};
use emograce::model::{init_model, param_group, EmoGraceModel, ModelConfig, ParamGroup, Tagger, Vocab};
use emograce::nn::{grad_check, Array, SeedStream};
use emograce::synth::templated_corpus;
use emograce::textseg::{decode_spans, encode_tags};
use emograce::trainer::{accumulate_batch, encode_examples, run_training, Example, GhlStates, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn averaged_performance_columns() -> Outcome {
    let c1 = averaged_performance(&ScoreVector::from_array([65.3, 42.0, 65.9, 42.9, 63.4, 46.5, 10.5])).map_err(|e| e.to_string())?;
    let c41 = averaged_performance(&ScoreVector::from_array([70.1, 46.9, 67.1, 47.1, 64.3, 46.2, 14.1])).map_err(|e| e.to_string())?;
    check(
        (c1 - 48.1).abs() <= 0.05 && (c41 - 50.8).abs() <= 0.05,
        format!("config 1 → {c1:.4} (48.1), config 41 → {c41:.4} (50.8)"),
    )
}

fn cross_validation_means() -> Outcome {
    let c41 = mean(&[49.3, 45.9, 52.3, 49.6, 46.7, 47.7, 47.2, 47.7, 44.1, 49.0]).unwrap();
    let c1 = mean(&[41.8, 38.4, 41.9, 43.1, 44.3, 46.4, 40.6, 41.5, 40.1, 43.0]).unwrap();
    check(
        (c41 - 48.0).abs() <= 0.05 && (c1 - 42.1).abs() <= 0.05,
        format!("config 41 joint mean {c41:.4} (48.0), config 1 joint mean {c1:.4} (42.1)"),
    )
}

fn majority_vote_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    for case in 0..n {
        let len = rng.random_range(1..80);
        let annotators: Vec<Vec<LabeledSpan>> = (0..3).map(|_| random_spans(&mut rng, len, 5)).collect();
        let recs = records(&"y".repeat(len), &annotators);
        let group: Vec<_> = recs.iter().collect();
        let merged = merge_spans(&group).map_err(|e| e.to_string())?;
        let (runs, annotated, kept) = brute_force_vote(len, &annotators);
        if merged.spans != runs || merged.annotated_chars != annotated || merged.kept_chars != kept {
            return Err(format!("instance {case} disagrees: {annotators:?}"));
        }
    }
    Ok(format!("{n} instances agree with per-character voting"))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 2000;
    for case in 0..n {
        let (gold, pred) = random_eval_docs(&mut rng);
        let span = span_prf(&gold, &pred).map_err(|e| e.to_string())?;
        let joint = joint_prf(&gold, &pred).map_err(|e| e.to_string())?;
        if !metrics_match(&span, brute_force_metrics(&gold, &pred, false))
            || !metrics_match(&joint, brute_force_metrics(&gold, &pred, true))
            || joint.tp > span.tp
        {
            return Err(format!("instance {case} disagrees"));
        }
    }
    Ok(format!("{n} instances agree with the pairwise matcher; joint tp ≤ span tp"))
}

fn tiny_fixture() -> (EmoGraceModel, Vec<Example>, RunConfig) {
    let docs = templated_corpus();
    let vocab = Vocab::build(docs.iter().map(|d| d.text.as_str()));
    let cfg = RunConfig {
        d_model: 8,
        max_seq_len: 12,
        ..RunConfig::tiny()
    };
    let model = init_model(&cfg.model_config(vocab.len()), 17).unwrap();
    let data = encode_examples(&docs, &vocab, cfg.max_seq_len).unwrap();
    (model, data, cfg)
}

fn gradient_certification() -> Outcome {
    let (model, data, cfg) = tiny_fixture();
    let batch: Vec<&Example> = vec![&data[0], &data[13], &data[30]];
    let ghl = GhlStates::new(&cfg).map_err(|e| e.to_string())?;
    let config = model.config.clone();
    let start = Instant::now();
    let report = grad_check(
        &model.params,
        |p| {
            let mut m = EmoGraceModel {
                config: config.clone(),
                params: std::mem::take(p),
            };
            let loss = accumulate_batch(&mut m, &batch, &cfg, 3, &mut ghl.clone(), SeedStream::new(2), 1.0);
            *p = m.params;
            loss
        },
        1e-5,
        8,
        SeedStream::new(5),
    )
    .map_err(|e| e.to_string())?;
    check(
        report.passes(1e-4) && report.tensors_checked == model.params.len() && start.elapsed() < Duration::from_secs(60),
        format!(
            "max relative error {:.2e} over {} coordinates in {}/{} tensors, {:.1?}",
            report.max_relative_error,
            report.coordinates_checked,
            report.tensors_checked,
            model.params.len(),
            start.elapsed()
        ),
    )
}

fn ghl_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let random_logits = |rng: &mut ChaCha8Rng, rows: usize| {
        Array::matrix(rows, 3, (0..rows * 3).map(|_| rng.random_range(-4.0..4.0)).collect())
    };
    let mut worst_ce = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let rows = rng.random_range(1..30);
        let z = random_logits(&mut rng, rows);
        let t: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let m = vec![true; rows];
        let ce = cross_entropy(&z, &t, &m).unwrap();
        let mut one = GhlState::new(1, 0.75).unwrap();
        worst_ce = worst_ce.max((ghl_loss(&z, &t, &m, &mut one).unwrap().loss - ce).abs());
        // Every difficulty in the same bin of a 24-bin state.
        let same = Array::matrix(rows, 3, t.iter().flat_map(|&k| (0..3).map(move |j| if j == k { 5.0 } else { 0.0 })).collect());
        let mut fresh = GhlState::new(24, 0.75).unwrap();
        let same_ce = cross_entropy(&same, &t, &m).unwrap();
        worst_ce = worst_ce.max((ghl_loss(&same, &t, &m, &mut fresh).unwrap().loss - same_ce).abs());
        let mut state = GhlState::new(rng.random_range(1..40), rng.random_range(0.0..=1.0)).unwrap();
        for _ in 0..3 {
            let w = ghl_loss(&z, &t, &m, &mut state).unwrap().weights;
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - rows as f64).abs());
        }
    }
    let mut s = GhlState::new(2, 0.5).unwrap();
    let w = s.update(&[0.1, 0.2, 0.3, 0.9]);
    let worked = w == [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0];
    check(
        worst_ce <= 1e-9 && worst_sum <= 1e-9 && worked,
        format!("|GHL − CE| ≤ {worst_ce:.1e}, |Σw − N| ≤ {worst_sum:.1e}, worked example {w:?}"),
    )
}

fn vat_identities() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 6,
        d_model: 8,
        n_heads: 2,
        total_layers: 2,
        shared_layers: 1,
        aec_layers: 1,
        max_seq_len: 4,
        dropout: 0.1,
    };
    let mask = [true, true];
    let mut worst_norm = 0.0f64;
    let mut min_kl = f64::INFINITY;
    let mut zero_ok = true;
    for seed in 0..100u64 {
        let model = init_model(&cfg, seed).map_err(|e| e.to_string())?;
        let ids = [2 + (seed % 4) as usize, 2 + (seed / 4 % 4) as usize];
        let zero = VatConfig { epsilon: 0.0, xi: 1e-3 };
        zero_ok &= vat_loss(&model, &ids, &mask, &zero, SeedStream::new(seed)).map_err(|e| e.to_string())? == 0.0;
        let eps = 0.05 + seed as f64 * 0.03;
        let vat = VatConfig { epsilon: eps, xi: 1e-3 };
        let adv = adversary(&model, &ids, &mask, &vat, VatBranches::Ate, SeedStream::new(seed)).map_err(|e| e.to_string())?;
        if let Some(r) = adv.r_adv {
            worst_norm = worst_norm.max((r.l2_norm() - eps).abs());
        }
        let kl = vat_loss(&model, &ids, &mask, &vat, SeedStream::new(seed)).map_err(|e| e.to_string())?;
        if !kl.is_finite() {
            return Err(format!("seed {seed}: KL {kl}"));
        }
        min_kl = min_kl.min(kl);
    }
    check(
        zero_ok && worst_norm <= 1e-6 && min_kl >= 0.0,
        format!("ε=0 gives 0: {zero_ok}; |‖r_adv‖ − ε| ≤ {worst_norm:.1e}; min KL {min_kl:.3e} over 100 seeds"),
    )
}

fn overfit_smoke() -> Outcome {
    let docs = templated_corpus();
    let cfg = RunConfig::tiny();
    let start = Instant::now();
    let vocab = Vocab::build(docs.iter().map(|d| d.text.as_str()));
    let mut model = init_model(&cfg.model_config(vocab.len()), cfg.seed).map_err(|e| e.to_string())?;
    let data = encode_examples(&docs, &vocab, cfg.max_seq_len).map_err(|e| e.to_string())?;
    let aec: Vec<String> = model
        .params
        .names()
        .filter(|n| param_group(&model.config, n) == ParamGroup::AecBranch)
        .map(str::to_string)
        .collect();
    let bits = |m: &EmoGraceModel| aec.iter().map(|n| m.params.bits(n)).collect::<Vec<_>>();
    let before = bits(&model);
    let mut ghl = GhlStates::new(&cfg).unwrap();
    let root = SeedStream::new(1);
    let mut none = |_: &EmoGraceModel| Ok(None);
    for phase in [1, 2] {
        emograce::trainer::train_phase(&mut model, &data, &cfg, phase, &mut ghl, root.split(phase as u64), &mut none)
            .map_err(|e| e.to_string())?;
    }
    let untouched = bits(&model) == before;

    let out = run_training(&docs, &docs, &cfg).map_err(|e| e.to_string())?;
    let report = evaluate(&out.best, &docs).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        report.joint.f1 >= 0.95 && untouched && elapsed < Duration::from_secs(300),
        format!(
            "joint F1 {:.3} on 32 sentences in {elapsed:.1?}; emotion branch unchanged by phases 1–2: {untouched}",
            report.joint.f1
        ),
    )
}

fn pipeline(dir: &Path) -> emograce::Result<Vec<(String, Vec<u8>)>> {
    let annotations = dir.join("annotations.jsonl");
    std::fs::write(&annotations, annotation_lines(&templated_corpus())).unwrap();
    let build = build_corpus(&load_annotations(&annotations)?)?;
    write_jsonl(&dir.join("corpus.jsonl"), &build.documents)?;
    write_json(&dir.join("iaa.json"), &build.report)?;
    let docs = load_corpus(&dir.join("corpus.jsonl"))?;
    let split = split_corpus(&docs, [0.75, 0.125, 0.125], 11)?;
    let cfg = RunConfig {
        epochs_step_1: 4,
        epochs_step_2: 1,
        epochs_step_3: 4,
        ..RunConfig::tiny()
    };
    let out = run_training(&split.train, &split.val, &cfg)?;
    out.best.save(&dir.join("model.ckpt"), Some(out.checkpoint_meta(&cfg)))?;
    std::fs::write(dir.join("train_log.jsonl"), out.log.to_jsonl(&cfg)?).unwrap();
    let tagger = Tagger::load(&dir.join("model.ckpt"))?;
    write_json(&dir.join("report.json"), &evaluate(&tagger, &split.test)?)?;
    ["corpus.jsonl", "iaa.json", "model.ckpt", "train_log.jsonl", "report.json"]
        .iter()
        .map(|f| Ok((f.to_string(), std::fs::read(dir.join(f)).unwrap())))
        .collect()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = pipeline(a.path()).map_err(|e| e.to_string())?;
    let y = pipeline(b.path()).map_err(|e| e.to_string())?;
    let differing: Vec<&str> = x.iter().zip(&y).filter(|(p, q)| p.1 != q.1).map(|(p, _)| p.0.as_str()).collect();
    check(
        differing.is_empty() && x.iter().all(|(_, bytes)| !bytes.is_empty()),
        format!(
            "{} artifacts byte-identical across two runs{}",
            x.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {differing:?}") }
        ),
    )
}

fn bio_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 1000;
    let mut spans_total = 0;
    for case in 0..n {
        let (text, spans) = random_token_doc(&mut rng);
        spans_total += spans.len();
        let tagged = encode_tags("doc", &text, &spans).map_err(|e| e.to_string())?;
        if decode_spans(&tagged) != spans {
            return Err(format!("document {case} {text:?} does not round-trip"));
        }
    }
    Ok(format!("{n} documents, {spans_total} spans round-trip exactly"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("averaged performance of published columns", averaged_performance_columns),
        ("cross-validation fold means", cross_validation_means),
        ("majority-vote oracle", majority_vote_oracle),
        ("metric oracle", metric_oracle),
        ("gradient certification", gradient_certification),
        ("GHL identities", ghl_identities),
        ("VAT identities", vat_identities),
        ("overfit smoke test", overfit_smoke),
        ("end-to-end determinism", determinism),
        ("BIO round trip", bio_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
