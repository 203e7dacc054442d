use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{example_gradient, ModelGrads, ModelState, NormalizedScores, ScoringError};
use crate::corpus::{DatasetSplit, EssayRecord, PromptSpec, PromptTable, SplitPart};
use crate::encoder::{Dropout, Parameters};
use crate::evaluation::evaluate;
use crate::tokenizer::TokenSequence;

/// Adam moment decay rates and denominator floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev-QWK improvement before stopping.
    pub early_stop_patience: usize,
    /// Weight of the mean trait loss relative to the overall loss.
    pub trait_loss_weight: f64,
    pub seed: u64,
    /// Update only the heads; encoder and embeddings stay fixed.
    pub freeze_encoder: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 30,
            early_stop_patience: 5,
            trait_loss_weight: 1.0,
            seed: 0,
            freeze_encoder: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        let bad = |m: &str| Err(ScoringError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("batch_size, max_epochs and early_stop_patience must be positive");
        }
        if self.early_stop_patience > self.max_epochs {
            return bad("early_stop_patience must not exceed max_epochs");
        }
        if !(self.trait_loss_weight > 0.0 && self.trait_loss_weight.is_finite()) {
            return bad("trait_loss_weight must be positive");
        }
        Ok(())
    }
}

/// Adam over an ordered list of tensors.
#[derive(Debug, Clone)]
pub struct AdamOptimizer {
    config: AdamConfig,
    learning_rate: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamOptimizer {
    pub fn new(config: AdamConfig, learning_rate: f64) -> Self {
        Self {
            config,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_qwk: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_qwk: f64,
    pub stopped_early: bool,
}

impl TrainingHistory {
    /// Tab-separated `epoch, train_loss, dev_qwk` rows for plotting.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch\ttrain_loss\tdev_qwk")?;
        for e in &self.epochs {
            writeln!(w, "{}\t{}\t{}", e.epoch, e.train_loss, e.dev_qwk)?;
        }
        Ok(())
    }
}

struct Example<'a> {
    seq: TokenSequence,
    prompt: &'a PromptSpec,
    gold: NormalizedScores,
}

fn prepare<'a>(
    model: &ModelState,
    records: &[&EssayRecord],
    table: &'a PromptTable,
) -> Result<Vec<Example<'a>>, ScoringError> {
    records
        .iter()
        .map(|r| {
            let prompt = table
                .get(r.prompt_id)
                .ok_or(ScoringError::UnknownPrompt(r.prompt_id))?;
            model.heads.set_for(prompt)?;
            Ok(Example {
                seq: model.encode(&r.text)?,
                prompt,
                gold: NormalizedScores::from_record(r, prompt)?,
            })
        })
        .collect()
}

fn mix_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch Adam on the train split with per-epoch dev QWK, keeping the
/// best-dev model and stopping after `early_stop_patience` epochs without
/// improvement. Batch order and dropout masks derive from `cfg.seed`, and
/// per-essay gradients are summed in batch order, so runs are bit-repeatable.
pub fn train(
    model: ModelState,
    records: &[EssayRecord],
    split: &DatasetSplit,
    table: &PromptTable,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainingHistory), ScoringError> {
    cfg.validate()?;
    let train_records = split.select(records, SplitPart::Train);
    let dev_records: Vec<EssayRecord> = split
        .select(records, SplitPart::Dev)
        .into_iter()
        .cloned()
        .collect();
    if train_records.is_empty() || dev_records.is_empty() {
        return Err(ScoringError::EmptySplit);
    }
    let examples = prepare(&model, &train_records, table)?;

    let mut model = model;
    let mut best = model.clone();
    let mut history = TrainingHistory {
        best_dev_qwk: f64::NEG_INFINITY,
        ..TrainingHistory::default()
    };
    let mut adam = AdamOptimizer::new(cfg.adam, cfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dropout_rate = model.config.dropout_rate;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let current = &model;
            let results: Vec<Result<(f64, ModelGrads), ScoringError>> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch, i));
                    let mut dropout = Dropout {
                        rate: dropout_rate,
                        rng: &mut rng,
                    };
                    let dropout = (dropout_rate > 0.0).then_some(&mut dropout);
                    example_gradient(
                        current,
                        &ex.seq,
                        ex.prompt,
                        &ex.gold,
                        cfg.trait_loss_weight,
                        cfg.freeze_encoder,
                        dropout,
                    )
                })
                .collect();

            let mut total = ModelGrads::zeros_for(&model);
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = match r {
                    Ok(v) => v,
                    Err(ScoringError::Encoder(crate::encoder::EncoderError::NonFiniteActivation { .. })) => {
                        return Err(ScoringError::DivergedLoss {
                            epoch,
                            last_good: Box::new(best),
                        })
                    }
                    Err(e) => return Err(e),
                };
                batch_loss += l;
                total.add_assign(&g);
            }
            if !batch_loss.is_finite() {
                return Err(ScoringError::DivergedLoss {
                    epoch,
                    last_good: Box::new(best),
                });
            }
            epoch_loss += batch_loss;
            total.scale(1.0 / batch.len() as f64);

            if cfg.freeze_encoder {
                let grads: Vec<&[f64]> = total.heads.tensors().into_iter().map(|(_, t)| t).collect();
                let params: Vec<&mut [f64]> =
                    model.heads.tensors_mut().into_iter().map(|(_, t)| t).collect();
                adam.step(params, grads);
            } else {
                let grads: Vec<&[f64]> = total.tensors().into_iter().map(|(_, t)| t).collect();
                let params: Vec<&mut [f64]> = model.tensors_mut().into_iter().map(|(_, t)| t).collect();
                adam.step(params, grads);
            }
        }

        let train_loss = epoch_loss / examples.len() as f64;
        let dev_qwk = evaluate(&model, &dev_records, table)
            .map_err(|e| ScoringError::InvalidConfig(format!("dev evaluation failed: {e}")))?
            .selection_metric();
        tracing::info!(epoch, train_loss, dev_qwk, "epoch finished");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_qwk,
        });

        if dev_qwk > history.best_dev_qwk {
            history.best_dev_qwk = dev_qwk;
            history.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    best.trained = true;
    Ok((best, history))
}
