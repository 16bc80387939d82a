//! Span and joint metrics, sentence-level emotion aggregation, and k-fold
//! cross-validation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, EmotionLabel, LabeledSpan};
use crate::error::{Error, Result};
use crate::model::Tagger;
use crate::nn::rng::label;
use crate::nn::SeedStream;
use crate::textseg::snap_spans;
use crate::trainer::{run_training, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    /// An empty prediction set has precision 1 only when gold is empty too,
    /// and likewise for recall.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize, other: usize| {
            if den > 0 {
                num as f64 / den as f64
            } else if other == 0 {
                1.0
            } else {
                0.0
            }
        };
        let precision = ratio(tp, tp + fp, fn_);
        let recall = ratio(tp, tp + fn_, fp);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn check_docs(gold: &[Vec<LabeledSpan>], pred: &[Vec<LabeledSpan>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::invalid(
            "pred",
            format!("{} predicted documents for {} gold", pred.len(), gold.len()),
        ));
    }
    for spans in gold.iter().chain(pred) {
        let mut sorted: Vec<&LabeledSpan> = spans.iter().collect();
        sorted.sort_by_key(|s| (s.start, s.end));
        for w in sorted.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::OverlappingSpans {
                    first: w[0].range(),
                    second: w[1].range(),
                });
            }
        }
    }
    Ok(())
}

fn micro<K, F>(gold: &[Vec<LabeledSpan>], pred: &[Vec<LabeledSpan>], key: F) -> Result<Metrics>
where
    K: std::hash::Hash + Eq,
    F: Fn(&LabeledSpan) -> K,
{
    check_docs(gold, pred)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gold_keys: HashSet<K> = g.iter().map(&key).collect();
        let hits = p.iter().filter(|s| gold_keys.contains(&key(s))).count();
        tp += hits;
        fp += p.len() - hits;
        fn_ += g.len() - hits;
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// Micro-averaged exact character-range matching, ignoring emotions.
pub fn span_prf(gold: &[Vec<LabeledSpan>], pred: &[Vec<LabeledSpan>]) -> Result<Metrics> {
    micro(gold, pred, |s| s.range())
}

/// As [`span_prf`], but a match also needs the same emotion.
pub fn joint_prf(gold: &[Vec<LabeledSpan>], pred: &[Vec<LabeledSpan>]) -> Result<Metrics> {
    micro(gold, pred, |s| (s.range(), s.emotion))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceEmotion {
    Label(EmotionLabel),
    Excluded,
}

/// One distinct non-`None` emotion gives that emotion, none gives `None`,
/// several give `Excluded`.
pub fn sentence_emotion(spans: &[LabeledSpan]) -> SentenceEmotion {
    let mut distinct: Vec<EmotionLabel> = spans
        .iter()
        .map(|s| s.emotion)
        .filter(|e| *e != EmotionLabel::None)
        .collect();
    distinct.sort();
    distinct.dedup();
    match distinct.as_slice() {
        [] => SentenceEmotion::Label(EmotionLabel::None),
        [e] => SentenceEmotion::Label(*e),
        _ => SentenceEmotion::Excluded,
    }
}

/// External sentence-level label name, if the emotion has one.
pub fn external_name(e: EmotionLabel) -> Option<&'static str> {
    match e {
        EmotionLabel::Happiness => Some("joy"),
        EmotionLabel::Anger => Some("anger"),
        EmotionLabel::Sadness => Some("sadness"),
        EmotionLabel::Fear => Some("fear"),
        EmotionLabel::None => None,
    }
}

pub const EXTERNAL_CLASSES: [&str; 4] = ["joy", "anger", "sadness", "fear"];

/// One line of a sentence-labeled dataset: `{text, emotion}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub emotion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub scored: usize,
    pub excluded: usize,
    pub per_class: BTreeMap<String, Metrics>,
    pub macro_f1: f64,
}

/// Macro F1 over the four external classes from (gold, predicted) label pairs;
/// `None` as a prediction marks an excluded document.
pub fn sentence_macro_f1(pairs: &[(String, Option<SentenceEmotion>)]) -> SentenceScore {
    let mut per_class = BTreeMap::new();
    let kept: Vec<(&str, &str)> = pairs
        .iter()
        .filter_map(|(g, p)| match p {
            Some(SentenceEmotion::Label(e)) => Some((g.as_str(), external_name(*e).unwrap_or("none"))),
            _ => None,
        })
        .collect();
    for class in EXTERNAL_CLASSES {
        let tp = kept.iter().filter(|(g, p)| *g == class && *p == class).count();
        let fp = kept.iter().filter(|(g, p)| *g != class && *p == class).count();
        let fn_ = kept.iter().filter(|(g, p)| *g == class && *p != class).count();
        per_class.insert(class.to_string(), Metrics::from_counts(tp, fp, fn_));
    }
    let macro_f1 = per_class.values().map(|m| m.f1).sum::<f64>() / EXTERNAL_CLASSES.len() as f64;
    SentenceScore {
        scored: kept.len(),
        excluded: pairs.len() - kept.len(),
        per_class,
        macro_f1,
    }
}

pub fn score_sentences(tagger: &Tagger, records: &[SentenceRecord]) -> Result<SentenceScore> {
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let pred = sentence_emotion(&tagger.predict(&r.text)?);
        let pred = (pred != SentenceEmotion::Excluded).then_some(pred);
        pairs.push((r.emotion.to_lowercase(), pred));
    }
    Ok(sentence_macro_f1(&pairs))
}

/// Gold emotion × predicted emotion over exactly matched spans, plus the
/// gold spans with no matching range and predicted spans with none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<usize>>,
    pub missed: Vec<usize>,
    pub spurious: Vec<usize>,
}

impl Confusion {
    pub fn from_docs(gold: &[Vec<LabeledSpan>], pred: &[Vec<LabeledSpan>]) -> Self {
        let k = EmotionLabel::ALL.len();
        let mut c = Confusion {
            labels: EmotionLabel::ALL.iter().map(|e| e.as_str().to_string()).collect(),
            matrix: vec![vec![0; k]; k],
            missed: vec![0; k],
            spurious: vec![0; k],
        };
        for (g, p) in gold.iter().zip(pred) {
            let by_range: BTreeMap<(usize, usize), EmotionLabel> =
                p.iter().map(|s| (s.range(), s.emotion)).collect();
            let gold_ranges: HashSet<(usize, usize)> = g.iter().map(|s| s.range()).collect();
            for s in g {
                match by_range.get(&s.range()) {
                    Some(e) => c.matrix[s.emotion.index()][e.index()] += 1,
                    None => c.missed[s.emotion.index()] += 1,
                }
            }
            for s in p.iter().filter(|s| !gold_ranges.contains(&s.range())) {
                c.spurious[s.emotion.index()] += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub documents: usize,
    pub ate: Metrics,
    pub joint: Metrics,
    /// Joint metrics restricted to one emotion class.
    pub per_emotion: BTreeMap<String, Metrics>,
    /// Mean per-emotion joint F1 over classes present in gold or predictions.
    pub macro_joint_f1: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn from_spans(gold: &[Vec<LabeledSpan>], pred: &[Vec<LabeledSpan>]) -> Result<Self> {
        let ate = span_prf(gold, pred)?;
        let joint = joint_prf(gold, pred)?;
        let mut per_emotion = BTreeMap::new();
        for e in EmotionLabel::ALL {
            let only = |docs: &[Vec<LabeledSpan>]| -> Vec<Vec<LabeledSpan>> {
                docs.iter()
                    .map(|d| d.iter().filter(|s| s.emotion == e).cloned().collect())
                    .collect()
            };
            let (g, p) = (only(gold), only(pred));
            if g.iter().chain(&p).any(|d| !d.is_empty()) {
                per_emotion.insert(e.as_str().to_string(), joint_prf(&g, &p)?);
            }
        }
        let macro_joint_f1 = if per_emotion.is_empty() {
            joint.f1
        } else {
            per_emotion.values().map(|m| m.f1).sum::<f64>() / per_emotion.len() as f64
        };
        Ok(Self {
            documents: gold.len(),
            ate,
            joint,
            per_emotion,
            macro_joint_f1,
            confusion: Confusion::from_docs(gold, pred),
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "documents: {}", self.documents);
        let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}", "", "precision", "recall", "f1", "tp", "fp", "fn");
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
                name, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            );
        };
        row("ATE", &self.ate);
        row("joint", &self.joint);
        for (name, m) in &self.per_emotion {
            row(name, m);
        }
        let _ = writeln!(out, "macro joint f1: {:.4}", self.macro_joint_f1);
        let _ = writeln!(out, "\nconfusion (rows gold, columns predicted):");
        let short: Vec<&str> = self.confusion.labels.iter().map(|l| &l[..3.min(l.len())]).collect();
        let _ = write!(out, "{:<10}", "");
        for s in &short {
            let _ = write!(out, " {s:>5}");
        }
        let _ = writeln!(out, " {:>7}", "missed");
        for (i, l) in self.confusion.labels.iter().enumerate() {
            let _ = write!(out, "{l:<10}");
            for v in &self.confusion.matrix[i] {
                let _ = write!(out, " {v:>5}");
            }
            let _ = writeln!(out, " {:>7}", self.confusion.missed[i]);
        }
        let _ = write!(out, "{:<10}", "spurious");
        for v in &self.confusion.spurious {
            let _ = write!(out, " {v:>5}");
        }
        out.push('\n');
        out
    }
}

/// Predicts every document and scores against token-snapped gold spans.
pub fn evaluate(tagger: &Tagger, docs: &[AnnotatedDocument]) -> Result<EvalReport> {
    let mut gold = Vec::with_capacity(docs.len());
    let mut pred = Vec::with_capacity(docs.len());
    for d in docs {
        gold.push(snap_spans(&d.text, &d.spans)?);
        pred.push(tagger.predict(&d.text)?);
    }
    EvalReport::from_spans(&gold, &pred)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Fold index of every item: a seeded shuffle dealt round-robin.
pub fn fold_assignments(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid("k", format!("{k} folds; need at least 2")));
    }
    if n < k {
        return Err(Error::invalid("k", format!("{k} folds for {n} documents")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).split(label("cv")).rng());
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_docs: usize,
    pub val_docs: usize,
    pub test_docs: usize,
    pub ate: Metrics,
    pub joint: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean_ate_f1: f64,
    pub mean_joint_f1: f64,
}

/// Each fold is the test set once. With k ≥ 3 the next fold validates and the
/// rest train; with k = 2 the training half doubles as validation.
pub fn cross_validate(docs: &[AnnotatedDocument], config: &RunConfig, k: usize) -> Result<CvReport> {
    let assign = fold_assignments(docs.len(), k, config.seed)?;
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let val_fold = if k >= 3 { Some((i + 1) % k) } else { None };
        let pick = |pred: &dyn Fn(usize) -> bool| -> Vec<AnnotatedDocument> {
            docs.iter()
                .zip(&assign)
                .filter(|(_, &f)| pred(f))
                .map(|(d, _)| d.clone())
                .collect()
        };
        let test = pick(&|f| f == i);
        let train = pick(&|f| f != i && Some(f) != val_fold);
        let val = match val_fold {
            Some(v) => pick(&|f| f == v),
            None => train.clone(),
        };
        let outcome = run_training(&train, &val, config)?;
        let report = evaluate(&outcome.best, &test)?;
        folds.push(FoldResult {
            fold: i,
            train_docs: train.len(),
            val_docs: val.len(),
            test_docs: test.len(),
            ate: report.ate,
            joint: report.joint,
        });
    }
    let ate: Vec<f64> = folds.iter().map(|f| f.ate.f1).collect();
    let joint: Vec<f64> = folds.iter().map(|f| f.joint.f1).collect();
    Ok(CvReport {
        k,
        mean_ate_f1: mean(&ate).unwrap_or(0.0),
        mean_joint_f1: mean(&joint).unwrap_or(0.0),
        folds,
    })
}
