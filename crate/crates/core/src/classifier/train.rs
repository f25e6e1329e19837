//! Training loop: seeded shuffling, batched forward/backward, stepwise
//! learning-rate decay, per-epoch metrics.

use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{
    apply_step, argmax_rows, backward, cross_entropy, forward, BnMode, ClassifierModel, Velocity,
};

/// Anything that can hand out per-image feature tensors. A source may
/// re-encode with augmentation each epoch; the cached fast path is a
/// plain lookup.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// (channels, height, width) of every feature tensor.
    fn feature_shape(&self) -> (usize, usize, usize);
    fn fetch(&self, idx: usize) -> Result<(u8, ndarray::Array3<f64>)>;
    /// Called once before each training epoch; augmenting sources
    /// reseed here.
    fn begin_epoch(&mut self, _epoch: usize) {}
}

/// Features held in memory, the simplest source.
pub struct InMemoryFeatures {
    pub features: Array4<f64>,
    pub labels: Vec<u8>,
}

impl FeatureSource for InMemoryFeatures {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn feature_shape(&self) -> (usize, usize, usize) {
        let s = self.features.shape();
        (s[1], s[2], s[3])
    }

    fn fetch(&self, idx: usize) -> Result<(u8, ndarray::Array3<f64>)> {
        Ok((
            self.labels[idx],
            self.features.index_axis(Axis(0), idx).to_owned(),
        ))
    }
}

impl FeatureSource for crate::cache::FeatureCache {
    fn len(&self) -> usize {
        self.shape.count
    }

    fn feature_shape(&self) -> (usize, usize, usize) {
        (self.shape.channels, self.shape.height, self.shape.width)
    }

    fn fetch(&self, idx: usize) -> Result<(u8, ndarray::Array3<f64>)> {
        crate::cache::FeatureCache::fetch(self, idx)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be >= 2".into()));
        }
        for w in self.decay_epochs.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidArgument(
                    "decay epochs must be strictly increasing".into(),
                ));
            }
        }
        if self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::InvalidArgument(
                "decay epochs must precede the final epoch".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.initial_lr * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,trainLoss,trainAcc,testAcc,wallSeconds";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_acc, self.wall_seconds
        )
    }
}

fn gather_batch(
    source: &dyn FeatureSource,
    indices: &[usize],
) -> Result<(Array4<f64>, Vec<u8>)> {
    let (c, h, w) = source.feature_shape();
    let fetched: Vec<(u8, ndarray::Array3<f64>)> = indices
        .par_iter()
        .map(|&i| source.fetch(i))
        .collect::<Result<_>>()?;
    let mut batch = Array4::zeros((indices.len(), c, h, w));
    let mut labels = Vec::with_capacity(indices.len());
    for (bi, (label, features)) in fetched.into_iter().enumerate() {
        batch.index_axis_mut(Axis(0), bi).assign(&features);
        labels.push(label);
    }
    Ok((batch, labels))
}

/// Argmax accuracy of the model over a source, batch-norm in eval mode.
pub fn evaluate(
    model: &mut ClassifierModel,
    source: &dyn FeatureSource,
    batch_size: usize,
) -> Result<f64> {
    let n = source.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty evaluation source".into()));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = gather_batch(source, chunk)?;
        let (logits, _) = forward(model, &batch, BnMode::Eval)?;
        for (pred, &label) in argmax_rows(&logits).iter().zip(&labels) {
            if *pred == label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

fn logits_for_training(
    model: &mut ClassifierModel,
    batch: &Array4<f64>,
    labels: &[u8],
) -> Result<(f64, usize, super::Gradients)> {
    let (logits, state) = forward(model, batch, BnMode::Train)?;
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    let correct = argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, &l)| **p == l as usize)
        .count();
    let grads = backward(model, &state, &dlogits)?;
    Ok((loss, correct, grads))
}

/// Full training loop. The test source, when given, is evaluated after
/// every epoch; metrics are returned per epoch and optionally streamed
/// through `on_epoch`.
pub fn train(
    model: &mut ClassifierModel,
    train_source: &mut dyn FeatureSource,
    test_source: Option<&dyn FeatureSource>,
    config: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochMetrics)>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let n = train_source.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training source".into()));
    }
    let mut velocity = Velocity::zeros_like(model);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let start = Instant::now();
    for epoch in 0..config.epochs {
        train_source.begin_epoch(epoch);
        let lr = config.lr_at_epoch(epoch);
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            if chunk.len() < 2 {
                // a trailing singleton cannot provide batch statistics
                continue;
            }
            let (batch, labels) = gather_batch(train_source, chunk)?;
            let (loss, batch_correct, grads) = logits_for_training(model, &batch, &labels)?;
            apply_step(model, &grads, &mut velocity, lr, config.momentum);
            epoch_loss += loss * chunk.len() as f64;
            correct += batch_correct;
            seen += chunk.len();
        }
        if !model.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let test_acc = match test_source {
            Some(ts) => evaluate(model, ts, config.batch_size)?,
            None => f64::NAN,
        };
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: epoch_loss / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&row);
        }
        metrics.push(row);
    }
    Ok(metrics)
}
