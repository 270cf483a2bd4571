//! Joint maximum-likelihood training of the summary networks and the flow.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph};
use crate::data::{Dataset, Standardizer};
use crate::error::{invalid, Error, Result};
use crate::fusion::MISSING_FILL;
use crate::model::PosteriorModel;
use crate::simulators::inject_missing;

/// Stream used for the frozen validation masks.
const VALIDATION_STREAM: u64 = 7;
/// Stream used for shuffling, dropout and training masks.
const TRAINING_STREAM: u64 = 11;
const VALIDATION_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of simulated training datasets.
    pub simulations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the squared-norm penalty on flow kernels.
    pub l2: f64,
    /// Size of the separately simulated validation set, relative to `simulations`.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            simulations: 5000,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-4,
            l2: 1e-4,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("batch size and epoch count must be positive"));
        }
        if self.simulations < self.batch_size {
            return Err(invalid(format!(
                "{} simulations cannot fill a batch of {}",
                self.simulations, self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.l2 >= 0.0 && (0.0..1.0).contains(&self.validation_fraction)) {
            return Err(invalid(
                "learning rate must be positive, l2 non-negative and the validation fraction in [0, 1)",
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.simulations.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn validation_size(&self) -> usize {
        (self.simulations as f64 * self.validation_fraction).round() as usize
    }
}

/// Cosine decay from `initial` at step 0 to zero at step `total - 1`.
pub fn cosine_lr(initial: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return initial;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    initial * 0.5 * (1.0 + (PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` without a validation set.
    pub validation_loss: Option<f64>,
}

/// Resumable optimizer and sampling state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    /// Fits the standardizer on `train` and sets up fresh optimizer state.
    pub fn start(model: &mut PosteriorModel, train: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.len() != config.simulations {
            return Err(invalid(format!("expected {} training datasets, got {}", config.simulations, train.len())));
        }
        model.standardizer = Standardizer::fit(train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAINING_STREAM);
        Ok(Self {
            config: config.clone(),
            adam: AdamState::new(&model.store),
            adam_config: AdamConfig::default(),
            epoch: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One pass over `train` in shuffled mini-batches, then the validation loss.
    pub fn run_epoch(&mut self, model: &mut PosteriorModel, train: &Dataset, valid: &Dataset) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(invalid("training already finished"));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let total = self.config.total_steps();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let diverged = |detail: String| Error::Diverged { epoch, batch: b + 1, detail };
            let batch = train.select(idx);
            let standardized = model.standardize(&batch.sources)?;
            let encoded = match model.task.missing_rate() {
                Some(range) => {
                    let masked = inject_missing(&standardized, range, MISSING_FILL, &mut self.rng)?;
                    model.encode(standardized, Some(&masked.mask))?
                }
                None => model.encode(standardized, None)?,
            };
            let mut g = Graph::training(self.rng.next_u64());
            let loss = model
                .loss_graph(&mut g, &batch.params, &encoded, self.config.l2)
                .map_err(|e| diverged(format!("forward pass: {e}")))?;
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss, &model.store).map_err(|e| diverged(format!("backward pass: {e}")))?;
            if let Some(name) = grads.first_non_finite() {
                return Err(diverged(format!("non-finite gradient in parameter block `{name}`")));
            }
            let lr = cosine_lr(self.config.learning_rate, self.adam.step as usize, total);
            adam_step(&mut model.store, &grads, &mut self.adam, &self.adam_config, lr)?;
            loss_sum += value;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            validation_loss: if valid.is_empty() {
                None
            } else {
                Some(validation_loss(model, valid, self.config.seed)?)
            },
        };
        self.epoch = epoch;
        self.history.push(record.clone());
        Ok(record)
    }
}

/// Mean negative log posterior density (standardized space, no penalty) over
/// `valid`. Missing-data masks depend only on `seed`, so repeated calls see
/// the same inputs.
pub fn validation_loss(model: &PosteriorModel, valid: &Dataset, seed: u64) -> Result<f64> {
    if valid.is_empty() {
        return Err(invalid("empty validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VALIDATION_STREAM);
    let mut total = 0.0;
    for start in (0..valid.len()).step_by(VALIDATION_CHUNK) {
        let chunk = valid.range(start, start + VALIDATION_CHUNK);
        let standardized = model.standardize(&chunk.sources)?;
        let encoded = match model.task.missing_rate() {
            Some(range) => {
                let masked = inject_missing(&standardized, range, MISSING_FILL, &mut rng)?;
                model.encode(standardized, Some(&masked.mask))?
            }
            None => model.encode(standardized, None)?,
        };
        let mut g = Graph::new();
        let loss = model.loss_graph(&mut g, &chunk.params, &encoded, 0.0)?;
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / valid.len() as f64)
}

/// Runs every remaining epoch.
pub fn train(
    model: &mut PosteriorModel,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::start(model, train, config)?;
    while !trainer.is_finished() {
        trainer.run_epoch(model, train, valid)?;
    }
    Ok(trainer.history)
}
