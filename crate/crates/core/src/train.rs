//! Mini-batch training with Adam, per-epoch learning-rate decay and
//! best-validation model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedInterview;
use crate::error::{Error, Result};
use crate::model::Hrgnn;
use crate::numerics::{lr_decay, AdamConfig, AdamState, NumericsError, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.001,
            lr_decay: 0.97,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning_rate and lr_decay must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub model: Hrgnn,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Fraction of interviews whose argmax class equals the label.
pub fn accuracy(probs: &[[f64; 2]], data: &[EncodedInterview]) -> f64 {
    let hits = probs
        .iter()
        .zip(data)
        .filter(|(p, iv)| usize::from(p[1] > p[0]) == iv.label)
        .count();
    hits as f64 / data.len().max(1) as f64
}

/// Trains `model` in place for `cfg.epochs` epochs.
///
/// Batch order and dropout masks come from two streams of `cfg.seed`, so a
/// run is fully determined by its inputs.
pub fn train(
    mut model: Hrgnn,
    train_set: &[EncodedInterview],
    validation: &[EncodedInterview],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);
    let mut adam = AdamState::new(&model.store, AdamConfig::default());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_decay(cfg.learning_rate, cfg.lr_decay, (epoch - 1) as u32);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<EncodedInterview> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let diverged = |reason: String| Error::Diverged {
                epoch,
                batch: b + 1,
                reason,
            };
            let g = model.batch_gradient(&batch, Some(&mut dropout_rng))?;
            if !g.loss.is_finite() {
                return Err(diverged(format!("loss {}", g.loss)));
            }
            match adam.step(&mut model.store, &g.grads, lr) {
                Ok(()) => {}
                Err(NumericsError::NonFiniteGradient(name)) => {
                    return Err(diverged(format!("non-finite gradient in {name}")))
                }
                Err(e) => return Err(e.into()),
            }
            loss_sum += g.loss * batch.len() as f64;
        }
        let probs = model.predict(validation)?;
        let mut validation_loss = 0.0;
        for (p, iv) in probs.iter().zip(validation) {
            validation_loss += crate::model::loss(p, iv.label)?;
        }
        let entry = EpochLog {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train_set.len() as f64,
            validation_loss: validation_loss / validation.len() as f64,
            validation_accuracy: accuracy(&probs, validation),
        };
        log::info!(
            "epoch {epoch}: lr {:.6} train loss {:.4} validation loss {:.4} accuracy {:.4}",
            entry.learning_rate,
            entry.train_loss,
            entry.validation_loss,
            entry.validation_accuracy
        );
        if best.as_ref().map_or(true, |(acc, _, _)| entry.validation_accuracy > *acc) {
            best = Some((entry.validation_accuracy, epoch, model.store.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}
