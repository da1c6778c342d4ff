//! Supervised source training with cross-entropy and SGD.

use serde::{Deserialize, Serialize};

use crate::autograd::{forward, infer, CachePolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{argmax_rows, cross_entropy_loss};
use crate::model::{BnMode, Model};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss of every minibatch, in order.
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Train on clean labelled data. Batch norm uses batch statistics while training and
/// folds them into the running averages; the returned model is in eval mode.
pub fn train_source(mut model: Model<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<(Model<f32>, TrainLog)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut opt = Optimizer::new(OptimizerConfig::Sgd {
        lr: cfg.lr,
        momentum: cfg.momentum,
    })?;
    let mut log = TrainLog::default();
    model.set_bn_mode(BnMode::Batch { blend: 1.0 });
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        Rng::new(derive_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let x = data.images().select_rows(rows)?;
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels()[r]).collect();
            let (logits, tape) = forward(&model, &x, &CachePolicy::full(), None)?;
            let loss = cross_entropy_loss(&logits, &labels)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged {
                    batch: log.batch_losses.len(),
                });
            }
            let stats = tape.bn_batch_stats().to_vec();
            let grads = tape.backward(&loss.grad)?;
            opt.step(&mut model, &grads)?;
            model.absorb_batch_stats(&stats);
            log.batch_losses.push(loss.value);
            total += loss.value * rows.len() as f64;
        }
        log.epoch_losses.push(total / data.len() as f64);
    }
    model.set_bn_mode(BnMode::Eval);
    model.meta.epochs = model.meta.epochs.saturating_add(cfg.epochs as u32);
    model.meta.dataset_fingerprint = data.fingerprint();
    Ok((model, log))
}

/// Argmax predictions in batches of `batch_size`, using the model's current BN mode.
pub fn predict(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let x = data.images().select_rows(chunk)?;
        preds.extend(argmax_rows(&infer(model, &x)?));
    }
    Ok(preds)
}

/// Fraction of misclassified samples.
pub fn error_rate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let preds = predict(model, data, batch_size)?;
    let wrong = preds.iter().zip(data.labels()).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / data.len().max(1) as f64)
}
