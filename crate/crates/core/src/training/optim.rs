use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Float;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moments for every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState<T: Float> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    ids: Vec<ParamId>,
}

impl<T: Float> AdamState<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        let ids: Vec<ParamId> = store.trainable().collect();
        let zeros = || ids.iter().map(|&id| vec![T::zero(); store.get(id).numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            learning_rate,
            ids,
        }
    }

    /// One bias-corrected update. `grads` is indexed by [`ParamId`] and must
    /// hold a gradient for every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        for &id in &self.ids {
            if grads.get(id.index()).and_then(|g| g.as_ref()).is_none() {
                return Err(Error::Training(format!("no gradient for parameter {}", store.name(id))));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bias1 = T::lit(1.0 - self.beta1.powi(t));
        let bias2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.epsilon);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads[id.index()].as_ref().unwrap();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + c1 * g[i];
                v[i] = b2 * v[i] + c2 * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Divides the learning rate by `factor` after `patience` consecutive epochs
/// without a strictly lower validation loss. The stall counter restarts after
/// every reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub initial_lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub stalls: usize,
    pub reductions: u32,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64, patience: usize, factor: f64) -> Self {
        PlateauSchedule { initial_lr, patience, factor, best: None, stalls: 0, reductions: 0 }
    }

    /// `initial_lr / factor^k` after `k` reductions.
    pub fn learning_rate(&self) -> f64 {
        self.initial_lr / self.factor.powi(self.reductions as i32)
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn update(&mut self, val_loss: f64) -> Result<f64> {
        if val_loss.is_nan() {
            return Err(Error::Training("validation loss is NaN".into()));
        }
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.stalls = 0;
        } else {
            self.stalls += 1;
            if self.stalls >= self.patience {
                self.reductions += 1;
                self.stalls = 0;
            }
        }
        Ok(self.learning_rate())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use crate::tensor::Tensor;

    fn store(values: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.register("p", Tensor::new(&[n], values).unwrap(), ParamKind::Trainable).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store(vec![0.3, -2.0]);
        let mut adam = AdamState::new(&s, 5e-5);
        for _ in 0..3 {
            adam.step(&mut s, &[Some(vec![0.0, 0.0])]).unwrap();
        }
        assert_eq!(s.get(id).data(), &[0.3, -2.0]);
        assert_eq!(adam.t, 3);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let (mut s, id) = store(vec![1.0]);
        let mut adam = AdamState::new(&s, 5e-5);
        adam.step(&mut s, &[Some(vec![0.1])]).unwrap();
        let step = s.get(id).data()[0] - 1.0;
        let expect = -5e-5 * 0.1 / (0.1 + 1e-8);
        assert!((step - expect).abs() < 1e-15, "{step}");
    }

    #[test]
    fn step_scales_with_learning_rate() {
        let run = |lr: f64| {
            let (mut s, id) = store(vec![1.0]);
            let mut adam = AdamState::new(&s, lr);
            adam.step(&mut s, &[Some(vec![0.1])]).unwrap();
            s.get(id).data()[0] - 1.0
        };
        assert!((run(5e-5) / run(5e-6) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, _) = store(vec![1.0]);
        let mut adam = AdamState::new(&s, 1e-3);
        assert!(adam.step(&mut s, &[None]).is_err());
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn plateau_divides_after_ten_stalls() {
        let mut p = PlateauSchedule::new(5e-5, 10, 10.0);
        assert_eq!(p.update(0.50).unwrap(), 5e-5);
        assert_eq!(p.update(0.49).unwrap(), 5e-5);
        for i in 0..10 {
            let lr = p.update(0.49 + 0.001 * (i % 3) as f64).unwrap();
            assert_eq!(lr, if i < 9 { 5e-5 } else { 5e-6 });
        }
        for i in 0..10 {
            let lr = p.update(0.6).unwrap();
            assert_eq!(lr, if i < 9 { 5e-6 } else { 5e-5 / 100.0 });
        }
        assert!(p.update(f64::NAN).is_err());
    }

    #[test]
    fn steady_improvement_keeps_rate() {
        let mut p = PlateauSchedule::new(5e-5, 10, 10.0);
        for e in 0..100 {
            assert_eq!(p.update(1.0 - e as f64 * 0.001).unwrap(), 5e-5);
        }
    }
}
