#![allow(dead_code)]

use emograce::corpus::{AnnotatorRecord, EmotionLabel, LabeledSpan};
use emograce::eval::Metrics;
use rand::Rng;

/// Per-character vote counts, consensus runs, and (annotated, kept) marks.
pub fn brute_force_vote(len: usize, annotators: &[Vec<LabeledSpan>]) -> (Vec<(usize, usize)>, usize, usize) {
    let mut votes = vec![0usize; len];
    for spans in annotators {
        for s in spans {
            for v in &mut votes[s.start..s.end] {
                *v += 1;
            }
        }
    }
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (i, &v) in votes.iter().enumerate() {
        if v >= 2 {
            match runs.last_mut() {
                Some(r) if r.1 == i => r.1 = i + 1,
                _ => runs.push((i, i + 1)),
            }
        }
    }
    let annotated = votes.iter().sum();
    let kept = votes.iter().filter(|&&v| v >= 2).sum();
    (runs, annotated, kept)
}

/// Non-overlapping random spans inside `0..len`, at most `max` of them.
pub fn random_spans<R: Rng>(rng: &mut R, len: usize, max: usize) -> Vec<LabeledSpan> {
    let mut cuts: Vec<usize> = (0..rng.random_range(0..=2 * max)).map(|_| rng.random_range(0..=len)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    cuts.chunks_exact(2)
        .map(|c| LabeledSpan::new(c[0], c[1], EmotionLabel::ALL[rng.random_range(0..5)]))
        .collect()
}

pub fn records(text: &str, annotators: &[Vec<LabeledSpan>]) -> Vec<AnnotatorRecord> {
    annotators
        .iter()
        .enumerate()
        .map(|(i, spans)| AnnotatorRecord {
            doc_id: "d".into(),
            annotator_id: format!("a{i}"),
            text: text.to_string(),
            spans: spans.clone(),
        })
        .collect()
}

/// Counts matches by comparing every gold span with every predicted span.
pub fn brute_force_metrics(
    gold: &[Vec<LabeledSpan>],
    pred: &[Vec<LabeledSpan>],
    with_emotion: bool,
) -> (usize, usize, usize, f64, f64, f64) {
    let mut tp = 0;
    let (mut n_gold, mut n_pred) = (0, 0);
    for (g, p) in gold.iter().zip(pred) {
        n_gold += g.len();
        n_pred += p.len();
        for a in g {
            for b in p {
                if a.start == b.start && a.end == b.end && (!with_emotion || a.emotion == b.emotion) {
                    tp += 1;
                }
            }
        }
    }
    let fp = n_pred - tp;
    let fn_ = n_gold - tp;
    let precision = if n_pred == 0 {
        if n_gold == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 {
        if n_pred == 0 { 1.0 } else { 0.0 }
    } else {
        tp as f64 / n_gold as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (tp, fp, fn_, precision, recall, f1)
}

pub fn metrics_match(m: &Metrics, oracle: (usize, usize, usize, f64, f64, f64)) -> bool {
    (m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1) == oracle
}

/// Gold/pred documents where predictions partly copy gold, sometimes with a
/// different emotion.
pub fn random_eval_docs<R: Rng>(rng: &mut R) -> (Vec<Vec<LabeledSpan>>, Vec<Vec<LabeledSpan>>) {
    let docs = rng.random_range(0..=5);
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for _ in 0..docs {
        let g = random_spans(rng, 30, 4);
        let p: Vec<LabeledSpan> = if rng.random_bool(0.5) {
            let mut p = Vec::new();
            for s in &g {
                if rng.random_bool(0.7) {
                    let mut s = *s;
                    if rng.random_bool(0.3) {
                        s.emotion = EmotionLabel::ALL[rng.random_range(0..5)];
                    }
                    p.push(s);
                }
            }
            p
        } else {
            random_spans(rng, 30, 4)
        };
        gold.push(g);
        pred.push(p);
    }
    (gold, pred)
}

/// Densities and normalized weights recomputed straight from the definition.
pub fn brute_force_ghl(batches: &[Vec<f64>], bins: usize, momentum: f64) -> Vec<Vec<f64>> {
    let mut density: Option<Vec<f64>> = None;
    let mut out = Vec::new();
    for g in batches {
        let bin = |x: f64| ((x * bins as f64) as usize).min(bins - 1);
        let mut counts = vec![0.0; bins];
        for &x in g {
            counts[bin(x)] += 1.0;
        }
        let d = match density {
            None => counts.clone(),
            Some(prev) => prev.iter().zip(&counts).map(|(s, r)| momentum * s + (1.0 - momentum) * r).collect(),
        };
        let raw: Vec<f64> = g
            .iter()
            .map(|&x| {
                let s = d[bin(x)];
                if s > 0.0 { 1.0 / s } else { 1.0 / counts[bin(x)] }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        out.push(raw.iter().map(|w| g.len() as f64 * w / total).collect());
        density = Some(d);
    }
    out
}

pub const WORDS: [&str; 10] = ["I", "love", "the", "park", "so", "much", "scared", "of", "rain", "you"];
pub const PUNCT: [&str; 3] = [".", ",", "!"];

/// A document of random words and punctuation with token-aligned spans.
pub fn random_token_doc<R: Rng>(rng: &mut R) -> (String, Vec<LabeledSpan>) {
    let n = rng.random_range(0..15);
    let mut text = String::new();
    for i in 0..n {
        if i > 0 && rng.random_bool(0.8) {
            text.push(' ');
        }
        if rng.random_bool(0.2) {
            text.push_str(PUNCT[rng.random_range(0..PUNCT.len())]);
        } else {
            text.push_str(WORDS[rng.random_range(0..WORDS.len())]);
        }
    }
    let tokens = emograce::textseg::tokenize(&text);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if rng.random_bool(0.3) {
            let len = rng.random_range(1..=3).min(tokens.len() - i);
            spans.push(LabeledSpan::new(
                tokens[i].start,
                tokens[i + len - 1].end,
                EmotionLabel::ALL[rng.random_range(0..5)],
            ));
            i += len;
        } else {
            i += 1;
        }
    }
    (text, spans)
}

/// Raw three-annotator export for `docs`: two annotators copy each gold span,
/// the third shifts its end by one character and sometimes disagrees on the
/// emotion.
pub fn annotation_lines(docs: &[emograce::corpus::AnnotatedDocument]) -> String {
    let mut out = String::new();
    for (i, d) in docs.iter().enumerate() {
        for a in 0..3 {
            let labels: Vec<serde_json::Value> = d
                .spans
                .iter()
                .map(|s| {
                    let (end, emotion) = if a == 2 {
                        let e = if i % 3 == 0 { EmotionLabel::None } else { s.emotion };
                        ((s.end + 1).min(d.text.chars().count()), e)
                    } else {
                        (s.end, s.emotion)
                    };
                    serde_json::json!([s.start, end, emotion.as_str()])
                })
                .collect();
            let line = serde_json::json!({
                "id": d.doc_id,
                "annotator": format!("ann{a}"),
                "text": d.text,
                "labels": labels,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    out
}
