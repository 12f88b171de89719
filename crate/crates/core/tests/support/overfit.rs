//! Memorization run on a handful of phantom slices, shared by the core tests
//! and the acceptance suite.

use std::time::{Duration, Instant};

use skullstrip_core::data::{generate_phantom, Dataset, PhantomParams, Sample};
use skullstrip_core::metrics::MetricsRecord;
use skullstrip_core::model::{Model, ModelConfig};
use skullstrip_core::nn::StrategyKind;
use skullstrip_core::training::{
    evaluate_loss, evaluate_subjects, train, EpochRecord, TrainConfig, TrainHistory, TrainObserver,
};

pub const SAMPLES: usize = 8;
pub const SIZE: usize = 64;
pub const EPOCHS: usize = 300;
pub const LOSS_TARGET: f64 = 0.01;
pub const ACCURACY_TARGET: f64 = 0.99;
pub const WINDOW: usize = 50;
/// Fast enough to memorize eight slices in a few hundred full-batch steps.
pub const LEARNING_RATE: f64 = 1e-3;

pub fn fixture() -> Vec<Sample> {
    (0..SAMPLES)
        .map(|k| {
            let (image, phantom) = generate_phantom(1000 + k as u64, SIZE, SIZE, &PhantomParams::default()).unwrap();
            Sample { image, mask: phantom.mask, subject: format!("overfit{k}"), slice: 0 }
        })
        .collect()
}

pub fn model_config(strategy: StrategyKind) -> ModelConfig {
    ModelConfig { strategy, depth: 2, seed: 7, ..Default::default() }
}

pub fn train_config() -> TrainConfig {
    TrainConfig { epochs: EPOCHS, batch_size: SAMPLES, initial_lr: LEARNING_RATE, seed: 11, ..Default::default() }
}

#[derive(Debug)]
pub struct OverfitReport {
    pub strategy: StrategyKind,
    pub history: TrainHistory,
    pub final_train_loss: f64,
    /// Inference-mode loss and pixel accuracy of the selected model on the fixture.
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// One record per fixture slice.
    pub metrics: Vec<MetricsRecord>,
    /// First epoch whose loss exceeds the loss `WINDOW` epochs earlier.
    pub window_violation: Option<(usize, f64, f64)>,
    pub dead_params: Vec<String>,
    pub elapsed: Duration,
}

impl OverfitReport {
    pub fn passed(&self) -> bool {
        self.final_train_loss < LOSS_TARGET
            && self.eval_loss < LOSS_TARGET
            && self.eval_accuracy > ACCURACY_TARGET
            && self.window_violation.is_none()
            && self.dead_params.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: train loss {:.5}, fixture loss {:.5}, accuracy {:.5}, window {:?}, dead {:?}, {:.1}s",
            self.strategy.label(),
            self.final_train_loss,
            self.eval_loss,
            self.eval_accuracy,
            self.window_violation,
            self.dead_params,
            self.elapsed.as_secs_f64()
        )
    }
}

struct Touched(Vec<bool>);

impl TrainObserver<f32> for Touched {
    fn on_gradients(&mut self, grads: &[Option<Vec<f32>>]) {
        for (seen, g) in self.0.iter_mut().zip(grads) {
            *seen |= g.as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0));
        }
    }
}

pub fn window_violation(records: &[EpochRecord]) -> Option<(usize, f64, f64)> {
    records
        .windows(WINDOW + 1)
        .find(|w| w[WINDOW].train_loss > w[0].train_loss)
        .map(|w| (w[WINDOW].epoch, w[0].train_loss, w[WINDOW].train_loss))
}

pub fn run(strategy: StrategyKind) -> OverfitReport {
    let start = Instant::now();
    let samples = fixture();
    let data = Dataset { train: samples.clone(), val: samples.clone(), test: Vec::new() };
    let model = Model::<f32>::build(model_config(strategy)).unwrap();
    let mut touched = Touched(vec![false; model.params().len()]);
    let cfg = train_config();
    let mut out = train(model, &data, &cfg, &mut touched).unwrap();
    let (eval_loss, eval_accuracy) = evaluate_loss(&mut out.best, &samples, SAMPLES).unwrap();
    let metrics = evaluate_subjects(&mut out.best, &samples, SAMPLES).unwrap();
    let params = out.best.params();
    let dead_params =
        params.trainable().filter(|id| !touched.0[id.index()]).map(|id| params.name(id).to_string()).collect();
    OverfitReport {
        strategy,
        final_train_loss: out.history.records.last().unwrap().train_loss,
        eval_loss,
        eval_accuracy,
        metrics,
        window_violation: window_violation(&out.history.records),
        dead_params,
        history: out.history,
        elapsed: start.elapsed(),
    }
}
