//! Multi-annotator aggregation.
//!
//! Three annotators label emotion-bearing aspect spans over the same text.
//! Characters marked by at least two of them survive; each surviving run is a
//! consensus span whose emotion is decided by a per-annotator majority vote.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::nn::SeedStream;

pub const ANNOTATORS_PER_DOC: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionLabel {
    Happiness,
    Anger,
    Sadness,
    Fear,
    None,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 5] = [
        EmotionLabel::Happiness,
        EmotionLabel::Anger,
        EmotionLabel::Sadness,
        EmotionLabel::Fear,
        EmotionLabel::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Happiness => "Happiness",
            EmotionLabel::Anger => "Anger",
            EmotionLabel::Sadness => "Sadness",
            EmotionLabel::Fear => "Fear",
            EmotionLabel::None => "None",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown emotion {s:?}"))
    }
}

/// A character range `[start, end)` in Unicode scalar values, with an emotion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub emotion: EmotionLabel,
}

impl LabeledSpan {
    pub fn new(start: usize, end: usize, emotion: EmotionLabel) -> Self {
        Self { start, end, emotion }
    }

    pub fn range(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorRecord {
    pub doc_id: String,
    pub annotator_id: String,
    pub text: String,
    /// Sorted by start; never overlapping.
    pub spans: Vec<LabeledSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DocStatus {
    #[default]
    Included,
    ExcludedNoOverlap,
    NeedsReview,
}

/// A consensus document, also the corpus line format `{id, text, spans}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub text: String,
    pub spans: Vec<LabeledSpan>,
    #[serde(skip)]
    pub status: DocStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IaaReport {
    pub total_annotated_chars: usize,
    pub kept_chars: usize,
    pub removed_chars: usize,
    pub retention_rate: f64,
    pub docs_total: usize,
    pub docs_excluded: usize,
    pub docs_needing_review: usize,
    /// Consensus spans without a majority emotion.
    pub emotion_review_cases: usize,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    annotator: String,
    text: String,
    labels: Vec<(usize, usize, String)>,
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

fn validate_spans(spans: &mut [LabeledSpan], text_len: usize) -> std::result::Result<(), String> {
    spans.sort_by_key(|s| (s.start, s.end));
    for s in spans.iter() {
        if s.start >= s.end || s.end > text_len {
            return Err(format!(
                "span ({}, {}) out of bounds for text of {text_len} characters",
                s.start, s.end
            ));
        }
    }
    for w in spans.windows(2) {
        if w[1].start < w[0].end {
            return Err(format!(
                "overlapping spans ({}, {}) and ({}, {})",
                w[0].start, w[0].end, w[1].start, w[1].end
            ));
        }
    }
    Ok(())
}

/// Reads line-delimited annotator records and validates them.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotatorRecord>> {
    let raw: Vec<(usize, RawRecord)> = read_jsonl(path)?;
    let err = |line: usize, message: String| Error::Input {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut texts: IndexMap<String, (usize, String)> = IndexMap::new();
    let mut seen: std::collections::HashSet<(String, String)> = Default::default();
    let mut out = Vec::with_capacity(raw.len());
    for (line, r) in raw {
        let mut spans = Vec::with_capacity(r.labels.len());
        for (start, end, emotion) in &r.labels {
            let emotion = emotion
                .parse::<EmotionLabel>()
                .map_err(|m| err(line, format!("document {}: {m}", r.id)))?;
            spans.push(LabeledSpan::new(*start, *end, emotion));
        }
        validate_spans(&mut spans, char_len(&r.text))
            .map_err(|m| err(line, format!("document {}: {m}", r.id)))?;
        match texts.get(&r.id) {
            Some((first, text)) if *text != r.text => {
                return Err(err(
                    line,
                    format!("document {}: text differs from the record on line {first}", r.id),
                ));
            }
            Some(_) => {}
            None => {
                texts.insert(r.id.clone(), (line, r.text.clone()));
            }
        }
        if !seen.insert((r.id.clone(), r.annotator.clone())) {
            return Err(err(
                line,
                format!("document {}: annotator {} appears twice", r.id, r.annotator),
            ));
        }
        out.push(AnnotatorRecord {
            doc_id: r.id,
            annotator_id: r.annotator,
            text: r.text,
            spans,
        });
    }
    Ok(out)
}

/// Groups records by document id, preserving first-appearance order.
pub fn group_by_doc(records: &[AnnotatorRecord]) -> IndexMap<&str, Vec<&AnnotatorRecord>> {
    let mut groups: IndexMap<&str, Vec<&AnnotatorRecord>> = IndexMap::new();
    for r in records {
        groups.entry(r.doc_id.as_str()).or_default().push(r);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    /// Maximal runs of characters with at least two votes.
    pub spans: Vec<(usize, usize)>,
    pub status: DocStatus,
    /// Character marks summed over annotators.
    pub annotated_chars: usize,
    /// Marks that fall on a consensus character.
    pub kept_chars: usize,
}

fn check_group(records: &[&AnnotatorRecord]) -> Result<()> {
    let doc_id = records.first().map_or("", |r| r.doc_id.as_str());
    if records.len() != ANNOTATORS_PER_DOC {
        return Err(Error::Document {
            doc_id: doc_id.to_string(),
            message: format!(
                "expected {ANNOTATORS_PER_DOC} annotator records, found {}",
                records.len()
            ),
        });
    }
    if records.iter().any(|r| r.text != records[0].text || r.doc_id != doc_id) {
        return Err(Error::Document {
            doc_id: doc_id.to_string(),
            message: "annotator records disagree on text or id".into(),
        });
    }
    Ok(())
}

/// Character-level ≥2-of-3 vote over one document's annotations.
pub fn merge_spans(records: &[&AnnotatorRecord]) -> Result<MergeOutcome> {
    check_group(records)?;
    // Sweep over span boundaries; the vote count is constant between events.
    let mut events: Vec<(usize, i64)> = Vec::new();
    for r in records {
        for s in &r.spans {
            events.push((s.start, 1));
            events.push((s.end, -1));
        }
    }
    events.sort_unstable();

    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut kept = 0usize;
    let mut count = 0i64;
    let mut i = 0;
    while i < events.len() {
        let pos = events[i].0;
        while i < events.len() && events[i].0 == pos {
            count += events[i].1;
            i += 1;
        }
        let Some(&(next, _)) = events.get(i) else {
            break;
        };
        if count >= 2 && next > pos {
            kept += (next - pos) * count as usize;
            match spans.last_mut() {
                Some(last) if last.1 == pos => last.1 = next,
                _ => spans.push((pos, next)),
            }
        }
    }

    let annotated: usize = records
        .iter()
        .flat_map(|r| r.spans.iter())
        .map(LabeledSpan::len)
        .sum();
    let all_marked = records.iter().all(|r| !r.spans.is_empty());
    let status = if spans.is_empty() && all_marked {
        DocStatus::ExcludedNoOverlap
    } else {
        DocStatus::Included
    };
    Ok(MergeOutcome {
        spans,
        status,
        annotated_chars: annotated,
        kept_chars: kept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionVote {
    pub annotator: usize,
    pub emotion: EmotionLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmotionResolution {
    Resolved(EmotionLabel),
    NeedsReview(Vec<EmotionVote>),
}

/// Each annotator votes with the emotion of their span that overlaps the
/// consensus span most (ties go to the earlier start). A label needs two votes.
pub fn resolve_emotion(span: (usize, usize), records: &[&AnnotatorRecord]) -> EmotionResolution {
    let mut votes = Vec::new();
    for (annotator, r) in records.iter().enumerate() {
        let best = r
            .spans
            .iter()
            .map(|s| (s.end.min(span.1).saturating_sub(s.start.max(span.0)), s))
            .filter(|(overlap, _)| *overlap > 0)
            .max_by(|(oa, sa), (ob, sb)| oa.cmp(ob).then(sb.start.cmp(&sa.start)));
        if let Some((_, s)) = best {
            votes.push(EmotionVote {
                annotator,
                emotion: s.emotion,
            });
        }
    }
    let mut counts: BTreeMap<EmotionLabel, usize> = BTreeMap::new();
    for v in &votes {
        *counts.entry(v.emotion).or_default() += 1;
    }
    match counts.into_iter().find(|(_, c)| *c >= 2) {
        Some((label, _)) => EmotionResolution::Resolved(label),
        None => EmotionResolution::NeedsReview(votes),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSpan {
    pub start: usize,
    pub end: usize,
    /// Majority emotion when one exists.
    pub emotion: Option<EmotionLabel>,
    pub votes: Vec<EmotionVote>,
}

/// A document held back from the corpus because a span lacks a majority emotion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDocument {
    pub id: String,
    pub text: String,
    pub annotators: Vec<String>,
    pub spans: Vec<ReviewSpan>,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusBuild {
    pub documents: Vec<AnnotatedDocument>,
    pub review: Vec<ReviewDocument>,
    pub report: IaaReport,
}

pub fn build_corpus(records: &[AnnotatorRecord]) -> Result<CorpusBuild> {
    let mut build = CorpusBuild::default();
    let report = &mut build.report;
    for (doc_id, group) in group_by_doc(records) {
        let merged = merge_spans(&group)?;
        report.docs_total += 1;
        report.total_annotated_chars += merged.annotated_chars;
        report.kept_chars += merged.kept_chars;
        if merged.status == DocStatus::ExcludedNoOverlap {
            report.docs_excluded += 1;
            continue;
        }
        let mut spans = Vec::with_capacity(merged.spans.len());
        let mut review_spans = Vec::with_capacity(merged.spans.len());
        let mut unresolved = 0;
        for &(start, end) in &merged.spans {
            match resolve_emotion((start, end), &group) {
                EmotionResolution::Resolved(emotion) => {
                    spans.push(LabeledSpan::new(start, end, emotion));
                    review_spans.push(ReviewSpan {
                        start,
                        end,
                        emotion: Some(emotion),
                        votes: Vec::new(),
                    });
                }
                EmotionResolution::NeedsReview(votes) => {
                    unresolved += 1;
                    review_spans.push(ReviewSpan {
                        start,
                        end,
                        emotion: None,
                        votes,
                    });
                }
            }
        }
        if unresolved > 0 {
            report.emotion_review_cases += unresolved;
            report.docs_needing_review += 1;
            build.review.push(ReviewDocument {
                id: doc_id.to_string(),
                text: group[0].text.clone(),
                annotators: group.iter().map(|r| r.annotator_id.clone()).collect(),
                spans: review_spans,
            });
        } else {
            build.documents.push(AnnotatedDocument {
                doc_id: doc_id.to_string(),
                text: group[0].text.clone(),
                spans,
                status: DocStatus::Included,
            });
        }
    }
    report.removed_chars = report.total_annotated_chars - report.kept_chars;
    report.retention_rate = if report.total_annotated_chars > 0 {
        report.kept_chars as f64 / report.total_annotated_chars as f64
    } else {
        0.0
    };
    Ok(build)
}

pub fn load_corpus(path: &Path) -> Result<Vec<AnnotatedDocument>> {
    let docs: Vec<(usize, AnnotatedDocument)> = read_jsonl(path)?;
    docs.into_iter()
        .map(|(line, mut d)| {
            validate_spans(&mut d.spans, char_len(&d.text)).map_err(|message| Error::Input {
                path: path.to_path_buf(),
                line,
                message: format!("document {}: {message}", d.doc_id),
            })?;
            Ok(d)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then `floor(ratio · N)` items for validation and test; the
/// remainder goes to training.
pub fn split_corpus<T: Clone>(items: &[T], ratios: [f64; 3], seed: u64) -> Result<Split<T>> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid("ratios", "ratios must be non-negative"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ratios", format!("ratios must sum to 1 (got {sum})")));
    }
    let n = items.len();
    let take = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_val = take(ratios[1]);
    let n_test = take(ratios[2]).min(n - n_val);
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).split(crate::nn::rng::label("split")).rng());
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmotionShare {
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub spans: usize,
    pub documents_without_spans: usize,
    pub emotions: BTreeMap<EmotionLabel, EmotionShare>,
    pub span_len_min: usize,
    pub span_len_max: usize,
    pub span_len_mean: f64,
    pub spans_per_doc_mean: f64,
    pub spans_per_doc_max: usize,
}

pub fn corpus_stats(docs: &[AnnotatedDocument]) -> CorpusStats {
    let mut stats = CorpusStats {
        documents: docs.len(),
        emotions: EmotionLabel::ALL
            .into_iter()
            .map(|e| (e, EmotionShare::default()))
            .collect(),
        ..Default::default()
    };
    let mut total_len = 0;
    for d in docs {
        if d.spans.is_empty() {
            stats.documents_without_spans += 1;
        }
        stats.spans_per_doc_max = stats.spans_per_doc_max.max(d.spans.len());
        for s in &d.spans {
            let len = s.len();
            stats.span_len_min = if stats.spans == 0 { len } else { stats.span_len_min.min(len) };
            stats.span_len_max = stats.span_len_max.max(len);
            total_len += len;
            stats.spans += 1;
            if let Some(e) = stats.emotions.get_mut(&s.emotion) {
                e.count += 1;
            }
        }
    }
    if stats.spans > 0 {
        stats.span_len_mean = total_len as f64 / stats.spans as f64;
        for e in stats.emotions.values_mut() {
            e.share = e.count as f64 / stats.spans as f64;
        }
    }
    if stats.documents > 0 {
        stats.spans_per_doc_mean = stats.spans as f64 / stats.documents as f64;
    }
    stats
}
