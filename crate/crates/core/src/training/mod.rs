//! Mini-batch training with Adam, a plateau schedule and best-validation
//! model selection, plus evaluation helpers.

mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_batch, Dataset, Sample};
use crate::metrics::{confusion_counts, segmentation_metrics, ConfusionCounts, MetricsRecord};
use crate::model::{predict_mask, Model};
use crate::nn::{Forward, Mode};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::{Error, Result};

pub use optim::{AdamState, PlateauSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub patience: usize,
    pub lr_factor: f64,
    /// Drives the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch_size: 16, initial_lr: 5e-5, patience: 10, lr_factor: 10.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.patience == 0 || !(self.lr_factor > 1.0) {
            return Err(Error::Config("patience must be positive and lr_factor above 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Record with the lowest validation loss; the earliest wins ties.
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_loss <= r.val_loss => Some(b),
            _ => Some(r),
        })
    }
}

/// Hooks into the training loop.
pub trait TrainObserver<T: Float> {
    /// Gradients of one mini-batch, indexed by parameter id.
    fn on_gradients(&mut self, _grads: &[Option<Vec<T>>]) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    /// Called whenever the validation loss reaches a new minimum.
    fn on_improvement(&mut self, _epoch: usize, _model: &Model<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl<T: Float> TrainObserver<T> for NoObserver {}

pub struct TrainOutcome<T: Float> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn shuffle_epoch(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean pixel cross-entropy of `logits` against `labels`.
pub fn sparse_ce_loss<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &Tensor<u8>) -> Result<Var> {
    Ok(tape.sparse_cross_entropy(logits, labels)?)
}

fn batch_tensors<T: Float>(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<T>, Tensor<u8>)> {
    let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
    let (x, y) = stack_batch(&refs)?;
    Ok((x.cast(), y))
}

/// Loss and pixel accuracy over `samples` in eval mode.
pub fn evaluate_loss<T: Float>(model: &mut Model<T>, samples: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut loss_sum = 0.0;
    let (mut correct, mut pixels) = (0u64, 0u64);
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors::<T>(samples, chunk)?;
        model.check_input(x.shape())?;
        let (network, params) = model.parts_mut();
        let mut f = Forward::inference(params);
        let xv = f.input(x);
        let logits = network.forward(&mut f, xv)?;
        let loss = sparse_ce_loss(f.tape_mut(), logits, &y)?;
        let n = y.numel() as u64;
        loss_sum += f.value(loss)?.item()?.as_f64() * n as f64;
        let pred = predict_mask(f.value(logits)?)?;
        correct += pred.data().iter().zip(y.data()).filter(|(a, b)| a == b).count() as u64;
        pixels += n;
    }
    Ok((loss_sum / pixels as f64, correct as f64 / pixels as f64))
}

/// Eval-mode masks for `samples`, in order.
pub fn predict_samples<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Tensor<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensors::<T>(samples, chunk)?;
        let pred = model.predict(&x)?;
        let [n, h, w]: [usize; 3] = pred.shape().try_into().unwrap();
        for k in 0..n {
            out.push(Tensor::new(&[h, w], pred.data()[k * h * w..(k + 1) * h * w].to_vec())?);
        }
    }
    Ok(out)
}

/// One record per subject with its slices pooled, in order of first
/// appearance.
pub fn evaluate_subjects<T: Float>(
    model: &mut Model<T>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<MetricsRecord>> {
    let preds = predict_samples(model, samples, batch_size)?;
    let mut pooled: Vec<(String, ConfusionCounts)> = Vec::new();
    for (s, p) in samples.iter().zip(&preds) {
        let c = confusion_counts(p, &s.mask)?;
        match pooled.iter_mut().find(|(id, _)| *id == s.subject) {
            Some((_, acc)) => acc.merge(&c),
            None => pooled.push((s.subject.clone(), c)),
        }
    }
    pooled.into_iter().map(|(subject, c)| Ok(MetricsRecord { subject, metrics: segmentation_metrics(&c)? })).collect()
}

/// Runs the full protocol and returns the model from the epoch with the
/// lowest validation loss.
pub fn train<T: Float>(
    mut model: Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let mut adam = AdamState::new(model.params(), cfg.initial_lr);
    let mut schedule = PlateauSchedule::new(cfg.initial_lr, cfg.patience, cfg.lr_factor);
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Model<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = schedule.learning_rate();
        adam.learning_rate = lr;
        let order = shuffle_epoch(cfg.seed, (epoch - 1) as u64, data.train.len());
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = batch_tensors::<T>(&data.train, chunk)?;
            model.check_input(x.shape())?;
            let grads = {
                let (network, params) = model.parts_mut();
                let mut f = Forward::new(params, Mode::Train);
                let xv = f.input(x);
                let logits = network.forward(&mut f, xv)?;
                let loss = sparse_ce_loss(f.tape_mut(), logits, &y)?;
                let value = f.value(loss)?.item()?.as_f64();
                if !value.is_finite() {
                    return Err(Error::Training(format!("non-finite loss {value} at epoch {epoch}, batch {}", b + 1)));
                }
                loss_sum += value * chunk.len() as f64;
                weight += chunk.len();
                f.backward(loss)?
            };
            observer.on_gradients(&grads);
            adam.step(model.params_mut(), &grads)?;
        }
        let train_loss = loss_sum / weight as f64;
        let (val_loss, val_accuracy) = evaluate_loss(&mut model, &data.val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord { epoch, train_loss, val_loss, val_accuracy, lr };
        history.records.push(record);
        observer.on_epoch(&record);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            observer.on_improvement(epoch, &model)?;
            best = Some((epoch, val_loss, model.clone()));
        }
        schedule.update(val_loss)?;
    }
    let (best_epoch, _, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best, best_epoch, history })
}
