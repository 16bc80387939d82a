//! Two-branch cascaded tagger.
//!
//! ```text
//! tokens ─ embed ─ enc[0..l) ─┬─ enc[l..L) ─ ATE head (B/I/O)
//!                              │        │             │ label distribution
//!                              │        └ memory ┐    ▼
//!                              └─ + dist · label_emb ─ dec[0..A) ─ AEC head (6 tags)
//! ```
//!
//! Encoder blocks are post-norm transformer layers. Each decoder block runs
//! bidirectional self-attention, cross-attention over the final ATE-branch
//! states, and a feed-forward sublayer, each followed by residual + norm.
//!
//! Parameter count, with `d = d_model`, `V = vocab_size`, `P = max_seq_len`,
//! `L` encoder layers and `A` decoder layers:
//!
//! ```text
//! (V + P)·d + 2d                 embeddings + embedding norm
//! + L·(12d² + 13d)               encoder blocks
//! + A·(16d² + 19d)               decoder blocks
//! + (3d + 3) + 3d + (6d + 6)     ATE head, label embeddings, AEC head
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledSpan;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::init::{seeded_init, InitScheme};
use crate::nn::rng::label;
use crate::nn::{checkpoint, Array, ParamStore, SeedStream, Tape, Var};
use crate::textseg::{decode_tags, tokenize, AteTag, EmoTag, Token};

pub const ATE_CLASSES: usize = 3;
pub const AEC_CLASSES: usize = 6;
pub const LN_EPS: f64 = 1e-12;
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub total_layers: usize,
    pub shared_layers: usize,
    pub aec_layers: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2 (PAD and UNK)".into());
        }
        if self.d_model < 2 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be ≥ 2 and divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.shared_layers < 1 || self.shared_layers > self.total_layers {
            return bad(format!(
                "shared_layers {} must lie in 1..={}",
                self.shared_layers, self.total_layers
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count (see module docs).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        (self.vocab_size + self.max_seq_len) * d
            + 2 * d
            + self.total_layers * (12 * d * d + 13 * d)
            + self.aec_layers * (16 * d * d + 19 * d)
            + (3 * d + 3)
            + 3 * d
            + (6 * d + 6)
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    Shared(usize),
    AteBranch,
    AecBranch,
}

pub fn param_group(config: &ModelConfig, name: &str) -> ParamGroup {
    if name.starts_with("emb.") {
        ParamGroup::Embedding
    } else if let Some(rest) = name.strip_prefix("enc.") {
        let layer: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(usize::MAX);
        if layer < config.shared_layers {
            ParamGroup::Shared(layer)
        } else {
            ParamGroup::AteBranch
        }
    } else if name.starts_with("ate.") {
        ParamGroup::AteBranch
    } else {
        ParamGroup::AecBranch
    }
}

/// Token vocabulary. Id 0 is padding, id 1 stands in for unseen tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>" {
            return Err(Error::Checkpoint("vocabulary must start with <pad>, <unk>".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tokens, index })
    }

    /// Lowercased tokens of `texts` in first-appearance order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for text in texts {
            for tok in tokenize(text) {
                let key = tok.text.to_lowercase();
                if !index.contains_key(&key) {
                    index.insert(key.clone(), tokens.len());
                    tokens.push(key);
                }
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn ids(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(&t.text)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmoGraceModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn linear_params(p: &mut ParamStore, seed: SeedStream, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    let w = format!("{name}.w");
    p.insert(
        w.clone(),
        seeded_init(&[fan_in, fan_out], InitScheme::UniformScaled, seed.split(label(&w))),
    )?;
    p.insert(format!("{name}.b"), Array::zeros(&[fan_out]))
}

fn norm_params(p: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    p.insert(format!("{name}.g"), seeded_init(&[d], InitScheme::Ones, SeedStream::new(0)))?;
    p.insert(format!("{name}.b"), Array::zeros(&[d]))
}

fn attention_params(p: &mut ParamStore, seed: SeedStream, name: &str, d: usize) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        linear_params(p, seed, &format!("{name}.{part}"), d, d)?;
    }
    Ok(())
}

fn ffn_params(p: &mut ParamStore, seed: SeedStream, name: &str, d: usize) -> Result<()> {
    linear_params(p, seed, &format!("{name}.in"), d, FFN_MULT * d)?;
    linear_params(p, seed, &format!("{name}.out"), FFN_MULT * d, d)
}

/// Deterministic initialization; values are rounded to single precision so
/// checkpoints capture them exactly.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<EmoGraceModel> {
    config.validate()?;
    let d = config.d_model;
    let s = SeedStream::new(seed).split(label("init"));
    let mut p = ParamStore::new();
    p.insert("emb.tok", seeded_init(&[config.vocab_size, d], InitScheme::UniformScaled, s.split(label("emb.tok"))))?;
    p.insert("emb.pos", seeded_init(&[config.max_seq_len, d], InitScheme::UniformScaled, s.split(label("emb.pos"))))?;
    norm_params(&mut p, "emb.ln", d)?;
    for i in 0..config.total_layers {
        let n = format!("enc.{i}");
        attention_params(&mut p, s, &format!("{n}.attn"), d)?;
        norm_params(&mut p, &format!("{n}.ln1"), d)?;
        ffn_params(&mut p, s, &format!("{n}.ffn"), d)?;
        norm_params(&mut p, &format!("{n}.ln2"), d)?;
    }
    linear_params(&mut p, s, "ate.head", d, ATE_CLASSES)?;
    p.insert("aec.label_emb", seeded_init(&[ATE_CLASSES, d], InitScheme::UniformScaled, s.split(label("aec.label_emb"))))?;
    for j in 0..config.aec_layers {
        let n = format!("dec.{j}");
        attention_params(&mut p, s, &format!("{n}.self"), d)?;
        norm_params(&mut p, &format!("{n}.ln1"), d)?;
        attention_params(&mut p, s, &format!("{n}.cross"), d)?;
        norm_params(&mut p, &format!("{n}.ln2"), d)?;
        ffn_params(&mut p, s, &format!("{n}.ffn"), d)?;
        norm_params(&mut p, &format!("{n}.ln3"), d)?;
    }
    linear_params(&mut p, s, "aec.head", d, AEC_CLASSES)?;
    p.round_to_f32();
    Ok(EmoGraceModel {
        config: config.clone(),
        params: p,
    })
}

/// Per-forward-pass settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassOptions {
    /// Dropout stream; `None` disables dropout (inference).
    pub dropout: Option<SeedStream>,
    /// Added to the summed token+position embeddings before normalization.
    pub perturbation: Option<Var>,
}

/// Graph handles produced by the shared trunk and the ATE branch.
#[derive(Debug, Clone, Copy)]
pub struct TrunkVars {
    pub embeddings: Var,
    pub shared: Var,
    pub ate_hidden: Var,
    pub ate_logits: Var,
}

struct Pass<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    config: &'a ModelConfig,
    dropout: Option<SeedStream>,
    dropout_calls: u64,
}

impl Pass<'_> {
    fn p(&mut self, name: &str) -> Var {
        self.tape.param(self.params, name)
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let rate = self.config.dropout;
        let Some(stream) = self.dropout else {
            return x;
        };
        if rate == 0.0 {
            return x;
        }
        use rand::Rng as _;
        let mut rng = stream.split(self.dropout_calls).rng();
        self.dropout_calls += 1;
        let shape = self.tape.value(x).shape().to_vec();
        let mut mask = Array::zeros(&shape);
        let keep = 1.0 / (1.0 - rate);
        for m in mask.data_mut() {
            *m = if rng.random::<f64>() < rate { 0.0 } else { keep };
        }
        self.tape.mul_const(x, mask)
    }

    fn attention(&mut self, query_in: Var, kv_in: Var, name: &str, key_mask: &[bool]) -> Var {
        let q = self.linear(query_in, &format!("{name}.q"));
        let k = self.linear(kv_in, &format!("{name}.k"));
        let v = self.linear(kv_in, &format!("{name}.v"));
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let scores = self.tape.matmul_nt(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let probs = self.tape.softmax_rows(scores, Some(key_mask));
            heads.push(self.tape.matmul(probs, vh));
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            self.tape.concat_cols(&heads)
        };
        self.linear(ctx, &format!("{name}.o"))
    }

    fn residual_norm(&mut self, x: Var, sub: Var, norm: &str) -> Var {
        let sub = self.dropout(sub);
        let sum = self.tape.add(x, sub);
        self.norm(sum, norm)
    }

    fn ffn(&mut self, x: Var, name: &str) -> Var {
        let h = self.linear(x, &format!("{name}.in"));
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{name}.out"))
    }

    fn encoder_block(&mut self, x: Var, i: usize, mask: &[bool]) -> Var {
        let n = format!("enc.{i}");
        let a = self.attention(x, x, &format!("{n}.attn"), mask);
        let x = self.residual_norm(x, a, &format!("{n}.ln1"));
        let f = self.ffn(x, &format!("{n}.ffn"));
        self.residual_norm(x, f, &format!("{n}.ln2"))
    }

    fn decoder_block(&mut self, x: Var, memory: Var, j: usize, mask: &[bool]) -> Var {
        let n = format!("dec.{j}");
        let a = self.attention(x, x, &format!("{n}.self"), mask);
        let x = self.residual_norm(x, a, &format!("{n}.ln1"));
        let c = self.attention(x, memory, &format!("{n}.cross"), mask);
        let x = self.residual_norm(x, c, &format!("{n}.ln2"));
        let f = self.ffn(x, &format!("{n}.ffn"));
        self.residual_norm(x, f, &format!("{n}.ln3"))
    }
}

impl EmoGraceModel {
    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, ids: &[usize], mask: &[bool]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if mask.len() != ids.len() {
            return Err(Error::Shape(format!(
                "mask length {} for {} tokens",
                mask.len(),
                ids.len()
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn pass<'a>(&'a self, tape: &'a mut Tape, opts: &PassOptions) -> Pass<'a> {
        Pass {
            tape,
            params: &self.params,
            config: &self.config,
            dropout: opts.dropout,
            dropout_calls: 0,
        }
    }

    /// Summed token and position embeddings (before normalization).
    pub fn raw_embeddings(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let tok = tape.param(&self.params, "emb.tok");
        let pos = tape.param(&self.params, "emb.pos");
        let e = tape.gather_rows(tok, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = tape.gather_rows(pos, &positions);
        tape.add(e, p)
    }

    /// Records the shared trunk and the ATE branch on `tape`. Inputs must
    /// already be validated and non-empty.
    pub fn build_trunk(&self, tape: &mut Tape, ids: &[usize], mask: &[bool], opts: &PassOptions) -> TrunkVars {
        let raw = self.raw_embeddings(tape, ids);
        let embeddings = match opts.perturbation {
            Some(r) => tape.add(raw, r),
            None => raw,
        };
        let mut pass = self.pass(tape, opts);
        let x = pass.norm(embeddings, "emb.ln");
        let mut x = pass.dropout(x);
        for i in 0..self.config.shared_layers {
            x = pass.encoder_block(x, i, mask);
        }
        let shared = x;
        for i in self.config.shared_layers..self.config.total_layers {
            x = pass.encoder_block(x, i, mask);
        }
        let ate_logits = pass.linear(x, "ate.head");
        TrunkVars {
            embeddings,
            shared,
            ate_hidden: x,
            ate_logits,
        }
    }

    /// Records the AEC decoder given a `T×3` ATE label distribution node.
    pub fn build_aec(&self, tape: &mut Tape, trunk: &TrunkVars, label_dist: Var, mask: &[bool], opts: &PassOptions) -> Var {
        let mut pass = self.pass(tape, opts);
        // Dropout streams for the decoder must not collide with the trunk's.
        pass.dropout = opts.dropout.map(|s| s.split(label("aec")));
        let table = pass.p("aec.label_emb");
        let label_vecs = pass.tape.matmul(label_dist, table);
        let mut x = pass.tape.add(trunk.shared, label_vecs);
        for j in 0..self.config.aec_layers {
            x = pass.decoder_block(x, trunk.ate_hidden, j, mask);
        }
        pass.linear(x, "aec.head")
    }

    /// `T×3` ATE logits.
    pub fn forward_ate(&self, ids: &[usize], mask: &[bool]) -> Result<Array> {
        self.check_input(ids, mask)?;
        if ids.is_empty() {
            return Ok(Array::zeros(&[0, ATE_CLASSES]));
        }
        let mut tape = Tape::new();
        let trunk = self.build_trunk(&mut tape, ids, mask, &PassOptions::default());
        Ok(tape.value(trunk.ate_logits).clone())
    }

    /// `T×6` AEC logits given an ATE label distribution (rows summing to 1).
    pub fn forward_aec(&self, ids: &[usize], mask: &[bool], ate_label_dist: &Array) -> Result<Array> {
        self.check_input(ids, mask)?;
        if ate_label_dist.rows() != ids.len() || ate_label_dist.cols() != ATE_CLASSES {
            return Err(Error::Shape(format!(
                "label distribution {:?} for {} tokens",
                ate_label_dist.shape(),
                ids.len()
            )));
        }
        for i in 0..ate_label_dist.rows() {
            let sum: f64 = ate_label_dist.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "ate_label_dist",
                    format!("row {i} sums to {sum}, expected 1"),
                ));
            }
        }
        if ids.is_empty() {
            return Ok(Array::zeros(&[0, AEC_CLASSES]));
        }
        let mut tape = Tape::new();
        let opts = PassOptions::default();
        let trunk = self.build_trunk(&mut tape, ids, mask, &opts);
        let dist = tape.input(ate_label_dist.clone());
        let logits = self.build_aec(&mut tape, &trunk, dist, mask, &opts);
        Ok(tape.value(logits).clone())
    }

    /// Cascaded inference on one window: argmax ATE tags feed the AEC branch as one-hots.
    pub fn tag_ids(&self, ids: &[usize]) -> Result<(Vec<AteTag>, Vec<EmoTag>)> {
        let mask = vec![true; ids.len()];
        self.check_input(ids, &mask)?;
        if ids.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut tape = Tape::new();
        let opts = PassOptions::default();
        let trunk = self.build_trunk(&mut tape, ids, &mask, &opts);
        let ate: Vec<usize> = tape.value(trunk.ate_logits).argmax_rows();
        let dist = tape.input(one_hot(&ate, ATE_CLASSES));
        let logits = self.build_aec(&mut tape, &trunk, dist, &mask, &opts);
        let emo = tape.value(logits).argmax_rows();
        Ok((
            ate.into_iter().map(AteTag::from_index).collect(),
            emo.into_iter().map(EmoTag::from_index).collect(),
        ))
    }
}

pub fn one_hot(indices: &[usize], classes: usize) -> Array {
    let mut a = Array::zeros(&[indices.len(), classes]);
    for (i, &c) in indices.iter().enumerate() {
        a.row_mut(i)[c] = 1.0;
    }
    a
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    model: ModelConfig,
    vocab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<serde_json::Value>,
}

const META_FORMAT: &str = "emograce-tagger";

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub model: EmoGraceModel,
    pub vocab: Vocab,
}

impl Tagger {
    pub fn token_ids(&self, tokens: &[Token]) -> Vec<usize> {
        self.vocab.ids(tokens)
    }

    /// Tokenize, tag in windows of `max_seq_len`, and decode spans.
    pub fn predict(&self, text: &str) -> Result<Vec<LabeledSpan>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let ids = self.token_ids(&tokens);
        let mut ate = Vec::with_capacity(ids.len());
        let mut emo = Vec::with_capacity(ids.len());
        for window in ids.chunks(self.model.config.max_seq_len) {
            let (a, e) = self.model.tag_ids(window)?;
            ate.extend(a);
            emo.extend(e);
        }
        Ok(decode_tags(&tokens, &ate, &emo))
    }

    pub fn to_bytes(&self, training: Option<serde_json::Value>) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            format: META_FORMAT.into(),
            model: self.model.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            training,
        };
        checkpoint::encode(&serde_json::to_string(&meta)?, &self.model.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<serde_json::Value>)> {
        let (meta, params) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)?;
        if meta.format != META_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format {}", meta.format)));
        }
        meta.model.validate()?;
        let vocab = Vocab::from_tokens(meta.vocab)?;
        if vocab.len() != meta.model.vocab_size {
            return Err(Error::Checkpoint("vocabulary size disagrees with model config".into()));
        }
        let expected = init_model(&meta.model, 0)?;
        for (name, value) in expected.params.iter() {
            match params.get(name) {
                Some(v) if v.shape() == value.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen tensor {name}"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Checkpoint("unexpected tensors".into()));
        }
        Ok((
            Tagger {
                model: EmoGraceModel {
                    config: meta.model,
                    params,
                },
                vocab,
            },
            meta.training,
        ))
    }

    pub fn save(&self, path: &Path, training: Option<serde_json::Value>) -> Result<()> {
        write_atomic(path, &self.to_bytes(training)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(Self::from_bytes(&bytes)?.0)
    }
}
