//! Greedy category-by-category hyperparameter sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedDocument, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, score_sentences, span_prf, SentenceRecord};
use crate::textseg::snap_spans;
use crate::trainer::{run_training, RunConfig};

/// Seven F1 percentages: four from the corpus splits, three from optional
/// external datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub ate_val: f64,
    pub joint_val: f64,
    pub ate_test: f64,
    pub joint_test: f64,
    /// ATE on a restaurant-review set.
    pub ate_restaurant: Option<f64>,
    /// ATE on a laptop-review set.
    pub ate_laptop: Option<f64>,
    /// Sentence-level emotion on an affect set.
    pub aec_affect: Option<f64>,
    /// Missing external entries were deliberately counted as zero.
    #[serde(default)]
    pub zero_filled: bool,
}

impl ScoreVector {
    pub fn internal(ate_val: f64, joint_val: f64, ate_test: f64, joint_test: f64) -> Self {
        Self {
            ate_val,
            joint_val,
            ate_test,
            joint_test,
            ate_restaurant: None,
            ate_laptop: None,
            aec_affect: None,
            zero_filled: false,
        }
    }

    pub fn from_array(s: [f64; 7]) -> Self {
        Self {
            ate_restaurant: Some(s[4]),
            ate_laptop: Some(s[5]),
            aec_affect: Some(s[6]),
            ..Self::internal(s[0], s[1], s[2], s[3])
        }
    }

    pub fn internal_scores(&self) -> [f64; 4] {
        [self.ate_val, self.joint_val, self.ate_test, self.joint_test]
    }

    pub fn external_scores(&self) -> [Option<f64>; 3] {
        [self.ate_restaurant, self.ate_laptop, self.aec_affect]
    }

    pub fn has_externals(&self) -> bool {
        self.external_scores().iter().all(Option::is_some)
    }
}

/// Mean of all seven scores. Missing external scores are an error unless
/// `zero_filled` is set.
pub fn averaged_performance(s: &ScoreVector) -> Result<f64> {
    let mut total: f64 = s.internal_scores().iter().sum();
    for (name, v) in ["ate_restaurant", "ate_laptop", "aec_affect"].iter().zip(s.external_scores()) {
        match v {
            Some(x) => total += x,
            None if s.zero_filled => {}
            None => {
                return Err(Error::invalid(
                    "scores",
                    format!("{name} missing; supply it or zero-fill explicitly"),
                ))
            }
        }
    }
    Ok(total / 7.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Seven-score average.
    Averaged,
    /// Mean of the four corpus scores, used when external scores are absent.
    InternalOnly,
}

pub fn objective(s: &ScoreVector) -> (f64, ObjectiveKind) {
    match averaged_performance(s) {
        Ok(v) => (v, ObjectiveKind::Averaged),
        Err(_) => (s.internal_scores().iter().sum::<f64>() / 4.0, ObjectiveKind::InternalOnly),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub candidates: Vec<toml::Table>,
}

/// Ordered categories of candidate config deltas.
///
/// ```toml
/// [[category]]
/// name = "batch size"
/// candidates = [{ batch_size = 8 }, { batch_size = 16 }]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    #[serde(rename = "category", default)]
    pub categories: Vec<Category>,
}

impl SweepPlan {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every delta must apply cleanly to `base`.
    pub fn validate(&self, base: &RunConfig) -> Result<()> {
        if self.categories.iter().all(|c| c.candidates.is_empty()) {
            return Err(Error::invalid("plan", "no candidates"));
        }
        for c in &self.categories {
            for d in &c.candidates {
                base.with_delta(d)
                    .map_err(|e| Error::Config(format!("category `{}`: {e}", c.name)))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub category: String,
    pub candidate: toml::Table,
    pub scores: ScoreVector,
    pub average: f64,
    pub objective: ObjectiveKind,
    pub adopted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub best: RunConfig,
    pub best_score: f64,
    pub log: Vec<SweepRecord>,
}

pub trait Evaluator {
    fn evaluate(&mut self, config: &RunConfig) -> Result<ScoreVector>;
}

impl<F: FnMut(&RunConfig) -> Result<ScoreVector>> Evaluator for F {
    fn evaluate(&mut self, config: &RunConfig) -> Result<ScoreVector> {
        self(config)
    }
}

/// Evaluates the base, then each category's candidates on top of the
/// incumbent; the best candidate is adopted only if it strictly improves.
pub fn greedy_sweep(plan: &SweepPlan, base: &RunConfig, evaluator: &mut dyn Evaluator) -> Result<SweepOutcome> {
    plan.validate(base)?;
    let scores = evaluator.evaluate(base)?;
    let (mut best_score, kind) = objective(&scores);
    let mut best = base.clone();
    let mut log = vec![SweepRecord {
        category: "base".into(),
        candidate: toml::Table::new(),
        scores,
        average: best_score,
        objective: kind,
        adopted: true,
    }];
    for cat in &plan.categories {
        let mut winner: Option<(usize, f64, RunConfig)> = None;
        for delta in &cat.candidates {
            let config = best.with_delta(delta)?;
            let scores = evaluator.evaluate(&config)?;
            let (score, kind) = objective(&scores);
            if winner.as_ref().is_none_or(|w| score > w.1) {
                winner = Some((log.len(), score, config));
            }
            log.push(SweepRecord {
                category: cat.name.clone(),
                candidate: delta.clone(),
                scores,
                average: score,
                objective: kind,
                adopted: false,
            });
        }
        if let Some((i, score, config)) = winner {
            if score > best_score {
                log[i].adopted = true;
                best_score = score;
                best = config;
            }
        }
    }
    Ok(SweepOutcome {
        best,
        best_score,
        log,
    })
}

/// Optional external datasets for the three external scores.
#[derive(Debug, Clone, Default)]
pub struct ExternalSets {
    pub restaurant: Option<Vec<AnnotatedDocument>>,
    pub laptop: Option<Vec<AnnotatedDocument>>,
    pub affect: Option<Vec<SentenceRecord>>,
    pub zero_fill: bool,
}

/// Trains on the split and scores validation, test and external sets.
pub struct TrainingEvaluator<'a> {
    pub data: &'a Split<AnnotatedDocument>,
    pub external: &'a ExternalSets,
}

fn ate_percent(tagger: &crate::model::Tagger, docs: &[AnnotatedDocument]) -> Result<f64> {
    let mut gold = Vec::with_capacity(docs.len());
    let mut pred = Vec::with_capacity(docs.len());
    for d in docs {
        gold.push(snap_spans(&d.text, &d.spans)?);
        pred.push(tagger.predict(&d.text)?);
    }
    Ok(100.0 * span_prf(&gold, &pred)?.f1)
}

impl Evaluator for TrainingEvaluator<'_> {
    fn evaluate(&mut self, config: &RunConfig) -> Result<ScoreVector> {
        let outcome = run_training(&self.data.train, &self.data.val, config)?;
        let t = &outcome.best;
        let val = evaluate(t, &self.data.val)?;
        let test = evaluate(t, &self.data.test)?;
        let mut s = ScoreVector::internal(
            100.0 * val.ate.f1,
            100.0 * val.joint.f1,
            100.0 * test.ate.f1,
            100.0 * test.joint.f1,
        );
        if let Some(docs) = &self.external.restaurant {
            s.ate_restaurant = Some(ate_percent(t, docs)?);
        }
        if let Some(docs) = &self.external.laptop {
            s.ate_laptop = Some(ate_percent(t, docs)?);
        }
        if let Some(records) = &self.external.affect {
            s.aec_affect = Some(100.0 * score_sentences(t, records)?.macro_f1);
        }
        s.zero_filled = self.external.zero_fill;
        Ok(s)
    }
}
