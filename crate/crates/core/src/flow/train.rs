//! Mini-batch Adam training with early stopping on validation NLL.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::FlowModel;
use crate::error::{Error, Result};
use crate::feature_store::FeatureDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the dataset held out for early stopping when no explicit
    /// validation set is given.
    pub validation_fraction: f64,
    pub seed: u64,
    pub chain_length: usize,
    pub hidden_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            seed: 0,
            chain_length: 32,
            hidden_width: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::validation("batch size, max epochs and patience must be positive"));
        }
        if self.chain_length == 0 || self.hidden_width == 0 {
            return Err(Error::validation("chain length and hidden width must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::validation(format!(
                "validation fraction must be in (0, 0.5], got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn best_val_nll(&self) -> f64 {
        self.epochs.iter().map(|r| r.val_nll).fold(f64::INFINITY, f64::min)
    }

    /// Running minimum of validation NLL after each epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.epochs
            .iter()
            .map(|r| {
                best = best.min(r.val_nll);
                best
            })
            .collect()
    }

    /// Plain-text `epoch,train_nll,val_nll` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            writeln!(out, "{},{},{}", r.epoch, r.train_nll, r.val_nll).unwrap();
        }
        out
    }
}

/// Trains on `dataset`, holding out `validation_fraction` of it (chosen by
/// seed) for early stopping.
pub fn train(dataset: &FeatureDataset, config: &TrainConfig) -> Result<(FlowModel, TrainingLog)> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::validation("need at least two vectors to train and validate"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64 * config.validation_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    train_with_validation(&dataset.select(train_idx), &dataset.select(val_idx), config)
}

/// Trains on `train_set` and early-stops on `val_set`, returning the
/// parameters with the lowest validation NLL.
pub fn train_with_validation(
    train_set: &FeatureDataset,
    val_set: &FeatureDataset,
    config: &TrainConfig,
) -> Result<(FlowModel, TrainingLog)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::validation("training and validation sets must be non-empty"));
    }
    if train_set.dim() != val_set.dim() {
        return Err(Error::dims(format!("train dim {} vs validation dim {}", train_set.dim(), val_set.dim())));
    }
    let rows = train_set.to_f64_rows();
    let val_rows = val_set.to_f64_rows();

    let mut model = FlowModel::init(train_set.dim(), config.chain_length, config.hidden_width, config.seed)?;
    let (shift, scale) = standardization(&rows);
    model.set_standardization(shift, scale)?;

    let mut params = model.parameters();
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..rows.len()).collect();

    let mut log = TrainingLog::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = idx.iter().map(|&k| rows[k].as_slice()).collect();
            let (nll, grad) = model.nll_and_gradients(&batch)?;
            train_sum += nll * batch.len() as f64;
            adam.step(&mut params, &grad.flatten());
            model.set_parameters(&params)?;
        }
        let train_nll = train_sum / rows.len() as f64;
        // A non-finite validation pass counts as no improvement.
        let val_nll = model.mean_nll(&val_rows).unwrap_or(f64::INFINITY);
        log.epochs.push(EpochRecord { epoch, train_nll, val_nll });
        log::debug!("epoch {epoch}: train {train_nll:.4} val {val_nll:.4}");
        if val_nll < best.0 {
            best = (val_nll, params.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if !best.0.is_finite() {
        return Err(Error::NonFinite { layer: model.chain_length() });
    }
    model.set_parameters(&best.1)?;
    Ok((model, log))
}

/// Per-coordinate mean and standard deviation, with a floor on the latter.
pub fn standardization(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(1e-6)).collect();
    (mean, std)
}
