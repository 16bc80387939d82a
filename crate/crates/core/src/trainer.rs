//! Three-phase training: two ATE-only phases, then joint ATE + AEC.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedDocument;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{adversary, ghl_weights, mean_weights, record_vat, GhlState, VatBranches, VatConfig};
use crate::model::{init_model, one_hot, param_group, EmoGraceModel, ModelConfig, ParamGroup, PassOptions, Tagger, Vocab};
use crate::nn::rng::label;
use crate::nn::{Array, ParamStore, SeedStream, Tape, Var};
use crate::textseg::encode_tags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmupMethod {
    Linear,
    Constant,
}

/// Flat run configuration; also the on-disk TOML format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub total_layers: usize,
    pub shared_layers: usize,
    pub aec_layers: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub gradient_accumulation: usize,
    pub epochs_step_1: usize,
    pub epochs_step_2: usize,
    pub epochs_step_3: usize,
    pub warmup_method: WarmupMethod,
    pub warmup_proportion: f64,
    pub lr_step_1: f64,
    pub lr_step_2: f64,
    pub lr_step_3: f64,
    pub vat_step_1: bool,
    pub vat_step_2: bool,
    pub vat_step_3: bool,
    pub vat_epsilon: f64,
    pub vat_xi: f64,
    pub ghl_ate_step_1: bool,
    pub ghl_ate_step_2: bool,
    pub ghl_ate_step_3: bool,
    pub ghl_aec_step_3: bool,
    pub ghl_bins: usize,
    pub ghl_momentum: f64,
    /// Feed gold instead of predicted ATE distributions to the AEC branch.
    pub teacher_forcing: bool,
    /// Keep the embeddings and the lowest k encoder layers fixed.
    pub freeze_layers: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

/// Settings that apply within one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSettings {
    pub epochs: usize,
    pub lr: f64,
    pub vat: bool,
    pub ghl_ate: bool,
    pub ghl_aec: bool,
}

impl RunConfig {
    pub fn baseline() -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            total_layers: 12,
            shared_layers: 9,
            aec_layers: 2,
            max_seq_len: 128,
            dropout: 0.1,
            weight_decay: 0.01,
            batch_size: 32,
            gradient_accumulation: 2,
            epochs_step_1: 5,
            epochs_step_2: 3,
            epochs_step_3: 10,
            warmup_method: WarmupMethod::Linear,
            warmup_proportion: 0.1,
            lr_step_1: 3e-5,
            lr_step_2: 1e-5,
            lr_step_3: 3e-6,
            vat_step_1: false,
            vat_step_2: true,
            vat_step_3: false,
            vat_epsilon: VatConfig::default().epsilon,
            vat_xi: VatConfig::default().xi,
            ghl_ate_step_1: true,
            ghl_ate_step_2: true,
            ghl_ate_step_3: true,
            ghl_aec_step_3: true,
            ghl_bins: crate::losses::DEFAULT_GHL_BINS,
            ghl_momentum: crate::losses::DEFAULT_GHL_MOMENTUM,
            teacher_forcing: false,
            freeze_layers: 0,
            seed: 42,
        }
    }

    /// Smaller batches, longer phases, constant warmup, five shared layers,
    /// six decoder layers and no adversarial term.
    pub fn config_41() -> Self {
        Self {
            batch_size: 8,
            epochs_step_1: 10,
            epochs_step_2: 9,
            epochs_step_3: 25,
            warmup_method: WarmupMethod::Constant,
            shared_layers: 5,
            aec_layers: 6,
            vat_step_2: false,
            ..Self::baseline()
        }
    }

    /// A desk-scale model that trains in seconds on a few dozen sentences.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            total_layers: 2,
            shared_layers: 1,
            aec_layers: 1,
            max_seq_len: 32,
            batch_size: 8,
            gradient_accumulation: 1,
            epochs_step_1: 20,
            epochs_step_2: 5,
            epochs_step_3: 40,
            warmup_method: WarmupMethod::Constant,
            warmup_proportion: 0.0,
            lr_step_1: 1e-2,
            lr_step_2: 1e-2,
            lr_step_3: 5e-3,
            ..Self::baseline()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "baseline" => Some(Self::baseline()),
            "config_41" => Some(Self::config_41()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes")
    }

    /// Overrides keys from `delta`; unknown keys are an error.
    pub fn with_delta(&self, delta: &toml::Table) -> Result<Self> {
        let mut table = self.to_table();
        for (k, v) in delta {
            if !table.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            table.insert(k.clone(), v.clone());
        }
        let c: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.gradient_accumulation == 0 {
            return bad("batch_size and gradient_accumulation must be positive".into());
        }
        for (i, lr) in [self.lr_step_1, self.lr_step_2, self.lr_step_3].iter().enumerate() {
            if !(*lr > 0.0) || !lr.is_finite() {
                return bad(format!("lr_step_{} must be positive", i + 1));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return bad("warmup_proportion must lie in [0, 1]".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.freeze_layers > self.total_layers {
            return bad("freeze_layers exceeds total_layers".into());
        }
        GhlState::new(self.ghl_bins, self.ghl_momentum).map_err(|e| Error::Config(e.to_string()))?;
        self.vat().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model_config(2).validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            total_layers: self.total_layers,
            shared_layers: self.shared_layers,
            aec_layers: self.aec_layers,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }

    pub fn vat(&self) -> VatConfig {
        VatConfig {
            epsilon: self.vat_epsilon,
            xi: self.vat_xi,
        }
    }

    pub fn phase(&self, phase: u8) -> PhaseSettings {
        match phase {
            1 => PhaseSettings {
                epochs: self.epochs_step_1,
                lr: self.lr_step_1,
                vat: self.vat_step_1,
                ghl_ate: self.ghl_ate_step_1,
                ghl_aec: false,
            },
            2 => PhaseSettings {
                epochs: self.epochs_step_2,
                lr: self.lr_step_2,
                vat: self.vat_step_2,
                ghl_ate: self.ghl_ate_step_2,
                ghl_aec: false,
            },
            _ => PhaseSettings {
                epochs: self.epochs_step_3,
                lr: self.lr_step_3,
                vat: self.vat_step_3,
                ghl_ate: self.ghl_ate_step_3,
                ghl_aec: self.ghl_aec_step_3,
            },
        }
    }
}

/// Learning rate at `step` of `total`: a ramp over the first
/// `round(proportion · total)` steps, then linear decay or constant.
pub fn schedule_lr(method: WarmupMethod, proportion: f64, peak: f64, step: usize, total: usize) -> f64 {
    let warmup = (proportion * total as f64).round() as usize;
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    match method {
        WarmupMethod::Constant => peak,
        WarmupMethod::Linear => {
            let left = total.saturating_sub(step + 1);
            peak * left as f64 / (total - warmup).max(1) as f64
        }
    }
}

pub fn lr_at(config: &RunConfig, phase: u8, step: usize, total: usize) -> f64 {
    schedule_lr(
        config.warmup_method,
        config.warmup_proportion,
        config.phase(phase).lr,
        step,
        total,
    )
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: indexmap::IndexMap<String, (Array, Array)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Default::default(),
        }
    }
}

/// Biases and normalization gains are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".g"))
}

impl AdamW {
    pub fn step(&mut self, params: &mut ParamStore, names: &[String], lr: f64, weight_decay: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for name in names {
            let grad = params.grad(name).clone();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array::zeros(grad.shape()), Array::zeros(grad.shape())));
            let decay = if decays(name) { weight_decay } else { 0.0 };
            let value = params.value_mut(name);
            for (((x, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *x -= lr * (update + decay * *x);
                *x = *x as f32 as f64;
            }
        }
    }
}

/// One tagged training window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub ate: Vec<usize>,
    pub emo: Vec<usize>,
}

/// Tags every document and cuts it into windows of at most `max_len` tokens.
pub fn encode_examples(docs: &[AnnotatedDocument], vocab: &Vocab, max_len: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in docs {
        let tagged = encode_tags(&d.doc_id, &d.text, &d.spans).map_err(|e| Error::Document {
            doc_id: d.doc_id.clone(),
            message: e.to_string(),
        })?;
        let ids = vocab.ids(&tagged.tokens);
        for start in (0..ids.len()).step_by(max_len.max(1)) {
            let end = (start + max_len).min(ids.len());
            out.push(Example {
                ids: ids[start..end].to_vec(),
                ate: tagged.ate_tags[start..end].iter().map(|t| t.index()).collect(),
                emo: tagged.emo_tags[start..end].iter().map(|t| t.index()).collect(),
            });
        }
    }
    Ok(out)
}

/// Running GHL densities, one per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GhlStates {
    pub ate: GhlState,
    pub aec: GhlState,
}

impl GhlStates {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            ate: GhlState::new(config.ghl_bins, config.ghl_momentum)?,
            aec: GhlState::new(config.ghl_bins, config.ghl_momentum)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_ate_f1: Option<f64>,
    pub val_joint_f1: Option<f64>,
    /// Rate of the last update in the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: u8,
    pub step: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub phase: u8,
    pub epoch: usize,
    pub val_joint_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best: Option<BestRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Settings {
        config: &'a RunConfig,
        ate_loss_weight: f64,
        aec_loss_weight: f64,
    },
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Best(&'a BestRecord),
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.epochs.extend(other.epochs);
        self.steps.extend(other.steps);
    }

    /// One JSON object per line, tagged by `kind`: settings, step, epoch, best.
    pub fn to_jsonl(&self, config: &RunConfig) -> Result<String> {
        let mut lines = vec![LogLine::Settings {
            config,
            ate_loss_weight: 1.0,
            aec_loss_weight: 1.0,
        }];
        lines.extend(self.steps.iter().map(LogLine::Step));
        lines.extend(self.epochs.iter().map(LogLine::Epoch));
        lines.extend(self.best.iter().map(LogLine::Best));
        crate::io::to_jsonl(&lines)
    }
}

/// Parameter names updated in `phase`.
pub fn trainable_params(model: &EmoGraceModel, phase: u8, freeze_layers: usize) -> Vec<String> {
    model
        .params
        .names()
        .filter(|name| {
            let group = param_group(&model.config, name);
            if phase < 3 && group == ParamGroup::AecBranch {
                return false;
            }
            if freeze_layers == 0 {
                return true;
            }
            let encoder_layer = name
                .strip_prefix("enc.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<usize>().ok());
            !(group == ParamGroup::Embedding || encoder_layer.is_some_and(|i| i < freeze_layers))
        })
        .map(str::to_string)
        .collect()
}

fn stack(tape: &mut Tape, parts: &[Var]) -> Var {
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(parts)
    }
}

/// Records the loss of one micro-batch, adds `scale ×` its gradient to the
/// store, and returns the loss value.
pub fn accumulate_batch(
    model: &mut EmoGraceModel,
    batch: &[&Example],
    config: &RunConfig,
    phase: u8,
    ghl: &mut GhlStates,
    seed: SeedStream,
    scale: f64,
) -> Result<f64> {
    let settings = config.phase(phase);
    let mut tape = Tape::new();
    let (mut ate_z, mut ate_t, mut aec_z, mut aec_t) = (vec![], vec![], vec![], vec![]);
    for (j, ex) in batch.iter().enumerate() {
        let mask = vec![true; ex.ids.len()];
        let opts = PassOptions {
            dropout: Some(seed.split(label("dropout")).split(j as u64)),
            perturbation: None,
        };
        let trunk = model.build_trunk(&mut tape, &ex.ids, &mask, &opts);
        ate_z.push(trunk.ate_logits);
        ate_t.extend_from_slice(&ex.ate);
        if phase == 3 {
            let dist = if config.teacher_forcing {
                tape.input(one_hot(&ex.ate, 3))
            } else {
                tape.softmax_rows(trunk.ate_logits, None)
            };
            aec_z.push(model.build_aec(&mut tape, &trunk, dist, &mask, &opts));
            aec_t.extend_from_slice(&ex.emo);
        }
    }

    let mut parts = Vec::new();
    let z = stack(&mut tape, &ate_z);
    let mask = vec![true; ate_t.len()];
    let w = if settings.ghl_ate {
        ghl_weights(tape.value(z), &ate_t, &mask, &mut ghl.ate)?
    } else {
        mean_weights(&mask)?
    };
    parts.push(tape.weighted_ce(z, &ate_t, &w));
    if phase == 3 {
        let z = stack(&mut tape, &aec_z);
        let w = if settings.ghl_aec {
            ghl_weights(tape.value(z), &aec_t, &mask, &mut ghl.aec)?
        } else {
            mean_weights(&mask)?
        };
        parts.push(tape.weighted_ce(z, &aec_t, &w));
    }

    if settings.vat {
        let branches = if phase == 3 { VatBranches::Both } else { VatBranches::Ate };
        let vat = config.vat();
        let mut terms = Vec::new();
        for (j, ex) in batch.iter().enumerate() {
            let mask = vec![true; ex.ids.len()];
            let adv = adversary(model, &ex.ids, &mask, &vat, branches, seed.split(label("vat")).split(j as u64))?;
            if let Some(t) = record_vat(model, &mut tape, &ex.ids, &mask, &adv, branches)? {
                terms.push(t);
            }
        }
        if !terms.is_empty() {
            let s = tape.sum(&terms);
            parts.push(tape.scale(s, 1.0 / batch.len() as f64));
        }
    }

    let total = tape.sum(&parts);
    let loss = tape.scalar(total);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss} in phase {phase}")));
    }
    let grads = tape.backward(total);
    tape.accumulate_param_grads(&grads, &mut model.params, scale);
    Ok(loss)
}

/// Validation scores `(ate_f1, joint_f1)` for the current model, if any.
pub type Validator<'a> = dyn FnMut(&EmoGraceModel) -> Result<Option<(f64, f64)>> + 'a;

/// Runs one phase. Batch order, dropout and probes all derive from `seed`.
pub fn train_phase(
    model: &mut EmoGraceModel,
    data: &[Example],
    config: &RunConfig,
    phase: u8,
    ghl: &mut GhlStates,
    seed: SeedStream,
    validate: &mut Validator<'_>,
) -> Result<TrainLog> {
    if !(1..=3).contains(&phase) {
        return Err(Error::invalid("phase", format!("{phase} is not 1, 2 or 3")));
    }
    if data.is_empty() {
        return Err(Error::invalid("data", "empty training set"));
    }
    let settings = config.phase(phase);
    if settings.epochs == 0 {
        return Err(Error::invalid("epochs", format!("phase {phase} has no epochs")));
    }
    let trainable = trainable_params(model, phase, config.freeze_layers);
    let bs = config.batch_size;
    let acc = config.gradient_accumulation;
    let updates_per_epoch = data.len().div_ceil(bs).div_ceil(acc);
    let total = settings.epochs * updates_per_epoch;

    let mut opt = AdamW::default();
    let mut log = TrainLog::default();
    let mut step = 0;
    model.params.zero_grads();
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed.split(label("shuffle")).split(epoch as u64).rng());
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for (u, group) in order.chunks(bs * acc).enumerate() {
            let micro: Vec<&[usize]> = group.chunks(bs).collect();
            for (m, idx) in micro.iter().enumerate() {
                let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
                let s = seed.split(label("batch")).split(epoch as u64).split((u * acc + m) as u64);
                losses.push(accumulate_batch(model, &batch, config, phase, ghl, s, 1.0 / micro.len() as f64)?);
            }
            lr = lr_at(config, phase, step, total);
            opt.step(&mut model.params, &trainable, lr, config.weight_decay);
            model.params.zero_grads();
            log.steps.push(StepRecord { phase, step, lr });
            step += 1;
        }
        let scores = validate(model)?;
        log.epochs.push(EpochRecord {
            phase,
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_ate_f1: scores.map(|s| s.0),
            val_joint_f1: scores.map(|s| s.1),
            lr,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validation joint F1 checkpoint; the final model without validation data.
    pub best: Tagger,
    pub log: TrainLog,
    pub ghl: GhlStates,
}

impl TrainOutcome {
    /// Metadata stored alongside the weights.
    pub fn checkpoint_meta(&self, config: &RunConfig) -> serde_json::Value {
        serde_json::json!({
            "config": config,
            "ghl": self.ghl,
            "best": self.log.best,
        })
    }
}

pub fn run_training(train: &[AnnotatedDocument], val: &[AnnotatedDocument], config: &RunConfig) -> Result<TrainOutcome> {
    run_training_observed(train, val, config, &mut |_| {})
}

/// As [`run_training`], calling `observe` after every epoch.
pub fn run_training_observed(
    train: &[AnnotatedDocument],
    val: &[AnnotatedDocument],
    config: &RunConfig,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = Vocab::build(train.iter().map(|d| d.text.as_str()));
    let mut model = init_model(&config.model_config(vocab.len()), config.seed)?;
    let data = encode_examples(train, &vocab, config.max_seq_len)?;
    if data.is_empty() {
        return Err(Error::invalid("train", "no tokens in the training split"));
    }
    let root = SeedStream::new(config.seed).split(label("train"));
    let mut ghl = GhlStates::new(config)?;
    let mut log = TrainLog::default();
    let mut best: Option<(BestRecord, Tagger)> = None;

    for phase in 1..=3u8 {
        if config.phase(phase).epochs == 0 {
            continue;
        }
        let mut epoch = 0;
        let mut validate = |m: &EmoGraceModel| -> Result<Option<(f64, f64)>> {
            epoch += 1;
            if val.is_empty() {
                return Ok(None);
            }
            let tagger = Tagger {
                model: m.clone(),
                vocab: vocab.clone(),
            };
            let report = evaluate(&tagger, val)?;
            if best.as_ref().is_none_or(|(b, _)| report.joint.f1 > b.val_joint_f1) {
                let record = BestRecord {
                    phase,
                    epoch: epoch - 1,
                    val_joint_f1: report.joint.f1,
                };
                best = Some((record, tagger));
            }
            Ok(Some((report.ate.f1, report.joint.f1)))
        };
        let phase_log = train_phase(&mut model, &data, config, phase, &mut ghl, root.split(phase as u64), &mut validate)?;
        for rec in &phase_log.epochs {
            observe(rec);
        }
        log.extend(phase_log);
    }
    let best = match best {
        Some((record, tagger)) => {
            log.best = Some(record);
            tagger
        }
        None => Tagger { model, vocab },
    };
    Ok(TrainOutcome { best, log, ghl })
}
