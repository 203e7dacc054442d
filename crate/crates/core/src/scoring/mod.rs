//! Genre-keyed fully connected heads on top of the pooled encoder output,
//! the scoring entry point, the training loss and its gradient.

mod checkpoint;
mod train;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{
    checkpoint_hash, load_model, load_model_with_hash, read_model, save_model, write_model,
    CHECKPOINT_FORMAT_VERSION,
};
pub use train::{
    train, AdamConfig, AdamOptimizer, EpochRecord, TrainConfig, TrainingHistory,
};

use crate::corpus::{denormalize_score, normalize_score, CorpusError, EssayRecord, Genre, PromptSpec, PromptTable};
use crate::encoder::{Dropout, Encoder, EncoderConfig, EncoderError, EncoderGrads, Parameters, Pooling};
use crate::linalg::dot;
use crate::tokenizer::{encode_essay, TokenSequence, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("no head set for {key} (prompt {prompt_id})")]
    UnknownGenre { key: String, prompt_id: u32 },
    #[error("unknown prompt {0}")]
    UnknownPrompt(u32),
    #[error("essay text is empty")]
    EmptyEssay,
    #[error("train and dev splits must both be non-empty")]
    EmptySplit,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss {
        epoch: usize,
        /// Best model seen before divergence.
        last_good: Box<ModelState>,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether heads are shared across a genre or dedicated to one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKeying {
    #[default]
    Genre,
    Prompt,
}

/// One logistic output unit over the pooled vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl Head {
    fn init(d_model: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (d_model + 1) as f64).sqrt();
        Self {
            weight: (0..d_model).map(|_| rng.random_range(-limit..limit)).collect(),
            bias: 0.0,
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        Self {
            weight: vec![0.0; d_model],
            bias: 0.0,
        }
    }

    pub fn logit(&self, pooled: &[f64]) -> f64 {
        dot(&self.weight, pooled) + self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    pub overall: Head,
    pub traits: BTreeMap<String, Head>,
}

impl HeadSet {
    fn zeros_like(&self) -> Self {
        let d = self.overall.weight.len();
        Self {
            overall: Head::zeros(d),
            traits: self.traits.keys().map(|k| (k.clone(), Head::zeros(d))).collect(),
        }
    }
}

/// Heads keyed by genre (or by prompt, for ablations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBank {
    pub keying: HeadKeying,
    pub sets: BTreeMap<String, HeadSet>,
}

/// Head-bank shape without weights: key to trait names.
pub type HeadLayout = BTreeMap<String, Vec<String>>;

impl HeadBank {
    /// One overall head per key, plus one trait head for every trait that any
    /// prompt under that key declares.
    pub fn new(table: &PromptTable, keying: HeadKeying, d_model: usize, rng: &mut impl Rng) -> Self {
        let layout = Self::layout_for(table, keying);
        let sets = layout
            .into_iter()
            .map(|(key, traits)| {
                let overall = Head::init(d_model, rng);
                let traits = traits
                    .into_iter()
                    .map(|t| (t, Head::init(d_model, rng)))
                    .collect();
                (key, HeadSet { overall, traits })
            })
            .collect();
        Self { keying, sets }
    }

    pub fn layout_for(table: &PromptTable, keying: HeadKeying) -> HeadLayout {
        let mut layout: HeadLayout = BTreeMap::new();
        for p in table.prompts() {
            let entry = layout.entry(Self::key(keying, p)).or_default();
            for name in p.trait_names() {
                if !entry.iter().any(|t| t == name) {
                    entry.push(name.to_string());
                }
            }
        }
        for traits in layout.values_mut() {
            traits.sort();
        }
        layout
    }

    pub fn from_layout(keying: HeadKeying, layout: &HeadLayout, d_model: usize) -> Self {
        let sets = layout
            .iter()
            .map(|(key, traits)| {
                (
                    key.clone(),
                    HeadSet {
                        overall: Head::zeros(d_model),
                        traits: traits.iter().map(|t| (t.clone(), Head::zeros(d_model))).collect(),
                    },
                )
            })
            .collect();
        Self { keying, sets }
    }

    pub fn layout(&self) -> HeadLayout {
        self.sets
            .iter()
            .map(|(k, s)| (k.clone(), s.traits.keys().cloned().collect()))
            .collect()
    }

    fn key(keying: HeadKeying, prompt: &PromptSpec) -> String {
        match keying {
            HeadKeying::Genre => prompt.genre.as_str().to_string(),
            HeadKeying::Prompt => format!("prompt-{}", prompt.prompt_id),
        }
    }

    pub fn key_for(&self, prompt: &PromptSpec) -> String {
        Self::key(self.keying, prompt)
    }

    pub fn set_for(&self, prompt: &PromptSpec) -> Result<&HeadSet, ScoringError> {
        let key = self.key_for(prompt);
        self.sets.get(&key).ok_or(ScoringError::UnknownGenre {
            key,
            prompt_id: prompt.prompt_id,
        })
    }

    fn set_for_mut(&mut self, prompt: &PromptSpec) -> Option<&mut HeadSet> {
        let key = self.key_for(prompt);
        self.sets.get_mut(&key)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            keying: self.keying,
            sets: self.sets.iter().map(|(k, s)| (k.clone(), s.zeros_like())).collect(),
        }
    }
}

impl Parameters for HeadBank {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (key, set) in &self.sets {
            out.push((format!("heads.{key}.overall.weight"), set.overall.weight.as_slice()));
            out.push((format!("heads.{key}.overall.bias"), std::slice::from_ref(&set.overall.bias)));
            for (name, head) in &set.traits {
                out.push((format!("heads.{key}.{name}.weight"), head.weight.as_slice()));
                out.push((format!("heads.{key}.{name}.bias"), std::slice::from_ref(&head.bias)));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (key, set) in &mut self.sets {
            out.push((format!("heads.{key}.overall.weight"), set.overall.weight.as_mut_slice()));
            out.push((format!("heads.{key}.overall.bias"), std::slice::from_mut(&mut set.overall.bias)));
            for (name, head) in &mut set.traits {
                out.push((format!("heads.{key}.{name}.weight"), head.weight.as_mut_slice()));
                out.push((format!("heads.{key}.{name}.bias"), std::slice::from_mut(&mut head.bias)));
            }
        }
        out
    }
}

/// Shape of a model; everything needed to rebuild it apart from weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Maximum content length L; sequences are L + 2 long.
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub pooling: Pooling,
    pub head_keying: HeadKeying,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 510,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            dropout_rate: 0.0,
            pooling: Pooling::Cls,
            head_keying: HeadKeying::Genre,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for synthetic experiments and tests.
    pub fn tiny() -> Self {
        Self {
            max_len: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            ..Self::default()
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_len + 2,
            dropout_rate: self.dropout_rate,
            pooling: self.pooling,
            seed: self.seed,
        }
    }
}

/// Everything needed to score an essay.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub heads: HeadBank,
    pub prompt_table_hash: String,
    pub trained: bool,
}

impl ModelState {
    /// Randomly initialized (untrained) model for `table`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, table: &PromptTable) -> Result<Self, ScoringError> {
        let encoder = Encoder::new(config.encoder_config(vocab.len()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_4ead));
        let heads = HeadBank::new(table, config.head_keying, config.d_model, &mut rng);
        Ok(Self {
            config,
            vocab,
            encoder,
            heads,
            prompt_table_hash: table.content_hash(),
            trained: false,
        })
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence, ScoringError> {
        Ok(encode_essay(text, &self.vocab, self.config.max_len)?)
    }

    /// Normalized predictions for an assembled sequence, traits in the
    /// prompt's declared order.
    pub fn predict(&self, seq: &TokenSequence, prompt: &PromptSpec) -> Result<NormalizedScores, ScoringError> {
        let set = self.heads.set_for(prompt)?;
        let pooled = self.encoder.represent(seq)?;
        apply_heads(set, &pooled, prompt)
    }

    /// Digest over all weights and the model shape; changes whenever any
    /// parameter changes.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Parameters for ModelState {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.encoder.tensors();
        out.extend(self.heads.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn apply_heads(set: &HeadSet, pooled: &[f64], prompt: &PromptSpec) -> Result<NormalizedScores, ScoringError> {
    let overall = logistic(set.overall.logit(pooled));
    let traits = prompt
        .trait_names()
        .map(|name| {
            set.traits
                .get(name)
                .map(|h| logistic(h.logit(pooled)))
                .ok_or_else(|| ScoringError::UnknownGenre {
                    key: format!("{}/{}", prompt.genre, name),
                    prompt_id: prompt.prompt_id,
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(NormalizedScores { overall, traits })
}

/// Overall and per-trait values on the [0, 1] scale; traits follow the
/// prompt's declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedScores {
    pub overall: f64,
    pub traits: Vec<f64>,
}

impl NormalizedScores {
    pub fn from_record(record: &EssayRecord, prompt: &PromptSpec) -> Result<Self, ScoringError> {
        let overall = normalize_score(record.overall_score, prompt.overall_range)?;
        let traits = prompt
            .traits
            .iter()
            .map(|t| {
                let v = record.trait_scores.get(&t.name).copied().ok_or_else(|| {
                    CorpusError::MalformedRow {
                        line: 0,
                        reason: format!("essay {} missing trait {}", record.essay_id, t.name),
                    }
                })?;
                normalize_score(v, t.range)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { overall, traits })
    }
}

/// Squared error on the overall score plus `trait_weight` times the mean
/// squared trait error.
pub fn loss(prediction: &NormalizedScores, gold: &NormalizedScores, trait_weight: f64) -> f64 {
    let overall = (prediction.overall - gold.overall).powi(2);
    if prediction.traits.is_empty() {
        return overall;
    }
    let traits: f64 = prediction
        .traits
        .iter()
        .zip(&gold.traits)
        .map(|(p, g)| (p - g).powi(2))
        .sum::<f64>()
        / prediction.traits.len() as f64;
    overall + trait_weight * traits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitScore {
    pub normalized: f64,
    pub rubric: i32,
}

/// Scores for one essay on both the normalized and the rubric scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub essay_id: String,
    pub prompt_id: u32,
    pub genre: Genre,
    pub overall_normalized: f64,
    pub overall_rubric: i32,
    pub traits: BTreeMap<String, TraitScore>,
}

// Keeps reported values inside the open unit interval even when the logistic
// saturates in floating point.
const OPEN_INTERVAL_MARGIN: f64 = 1e-12;

fn open_unit(v: f64) -> f64 {
    v.clamp(OPEN_INTERVAL_MARGIN, 1.0 - OPEN_INTERVAL_MARGIN)
}

fn essay_digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Tokenize, encode, pool and apply the prompt's genre heads.
pub fn score_essay(text: &str, prompt: &PromptSpec, model: &ModelState) -> Result<ScoreReport, ScoringError> {
    if text.trim().is_empty() {
        return Err(ScoringError::EmptyEssay);
    }
    let seq = model.encode(text)?;
    let pred = model.predict(&seq, prompt)?;
    let traits = prompt
        .traits
        .iter()
        .zip(&pred.traits)
        .map(|(t, &v)| {
            (
                t.name.clone(),
                TraitScore {
                    normalized: open_unit(v),
                    rubric: denormalize_score(v, t.range),
                },
            )
        })
        .collect();
    Ok(ScoreReport {
        essay_id: essay_digest(text),
        prompt_id: prompt.prompt_id,
        genre: prompt.genre,
        overall_normalized: open_unit(pred.overall),
        overall_rubric: denormalize_score(pred.overall, prompt.overall_range),
        traits,
    })
}

/// Scores a dataset record, keeping its essay id.
pub fn score_record(record: &EssayRecord, table: &PromptTable, model: &ModelState) -> Result<ScoreReport, ScoringError> {
    let prompt = table
        .get(record.prompt_id)
        .ok_or(ScoringError::UnknownPrompt(record.prompt_id))?;
    let mut report = score_essay(&record.text, prompt, model)?;
    report.essay_id = record.essay_id.clone();
    Ok(report)
}

/// Gradient of the training loss for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub heads: HeadBank,
}

impl ModelGrads {
    pub fn zeros_for(model: &ModelState) -> Self {
        Self {
            encoder: model.encoder.zero_grads(),
            heads: model.heads.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl Parameters for ModelGrads {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.encoder.tensors();
        out.extend(self.heads.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }
}

/// Training loss for one assembled essay.
pub fn example_loss(
    model: &ModelState,
    seq: &TokenSequence,
    prompt: &PromptSpec,
    gold: &NormalizedScores,
    trait_weight: f64,
) -> Result<f64, ScoringError> {
    let pred = model.predict(seq, prompt)?;
    Ok(loss(&pred, gold, trait_weight))
}

/// Loss and analytic gradient for one essay. With `head_only`, encoder
/// gradients are left at zero and the encoder backward pass is skipped.
pub fn example_gradient(
    model: &ModelState,
    seq: &TokenSequence,
    prompt: &PromptSpec,
    gold: &NormalizedScores,
    trait_weight: f64,
    head_only: bool,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(f64, ModelGrads), ScoringError> {
    let set = model.heads.set_for(prompt)?;
    let (states, cache) = model.encoder.forward_cached(seq, dropout)?;
    let pooled = crate::encoder::pool(&states, &seq.pad_mask, model.encoder.config.pooling);
    let pred = apply_heads(set, &pooled, prompt)?;
    let value = loss(&pred, gold, trait_weight);

    let mut grads = ModelGrads::zeros_for(model);
    let grad_set = grads
        .heads
        .set_for_mut(prompt)
        .expect("gradient bank mirrors model bank");
    let mut d_pooled = vec![0.0; pooled.len()];

    let mut push = |head: &Head, grad: &mut Head, p: f64, d_p: f64| {
        let dz = d_p * p * (1.0 - p);
        for ((g, x), (dp, w)) in grad
            .weight
            .iter_mut()
            .zip(&pooled)
            .zip(d_pooled.iter_mut().zip(&head.weight))
        {
            *g += dz * x;
            *dp += dz * w;
        }
        grad.bias += dz;
    };

    push(
        &set.overall,
        &mut grad_set.overall,
        pred.overall,
        2.0 * (pred.overall - gold.overall),
    );
    let n_traits = prompt.trait_count();
    for ((name, &p), &g) in prompt.trait_names().zip(&pred.traits).zip(&gold.traits) {
        let d_p = trait_weight * 2.0 * (p - g) / n_traits as f64;
        let head = &set.traits[name];
        let grad = grad_set.traits.get_mut(name).expect("mirrored trait head");
        push(head, grad, p, d_p);
    }

    if !head_only {
        grads.encoder = model.encoder.backward_pooled(seq, &cache, &d_pooled)?;
    }
    Ok((value, grads))
}
