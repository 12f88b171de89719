use rand::Rng;

use super::{normal_tensor, Forward, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::{Float, Result, Tensor, TensorError, Var};

/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square kernel, normal weights with standard deviation `gain / sqrt(fan_in)`
    /// and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = normal_tensor(&[cout, cin, kernel, kernel], gain / fan_in.sqrt(), rng)?;
        Ok(Conv2d {
            weight: store.register(&format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: store.register(&format!("{name}.bias"), Tensor::zeros(&[cout])?, ParamKind::Trainable)?,
            stride,
            padding,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape_mut().conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = normal_tensor(&[fout, fin], gain / (fin as f64).sqrt(), rng)?;
        Ok(Linear {
            weight: store.register(&format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: store.register(&format!("{name}.bias"), Tensor::zeros(&[fout])?, ParamKind::Trainable)?,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape_mut().linear(x, w, b)
    }
}

/// Stride-2, 2x2 transposed convolution: doubles H and W.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Each output pixel sees exactly one tap per input channel.
        let w = normal_tensor(&[cin, cout, 2, 2], (2.0 / cin as f64).sqrt(), rng)?;
        Ok(ConvTranspose2d {
            weight: store.register(&format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: store.register(&format!("{name}.bias"), Tensor::zeros(&[cout])?, ParamKind::Trainable)?,
            stride: 2,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape_mut().conv_transpose2d(x, w, b, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.register(&format!("{name}.gamma"), Tensor::ones(&[channels])?, ParamKind::Trainable)?,
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[channels])?, ParamKind::Trainable)?,
            running_mean: store.register(
                &format!("{name}.running_mean"),
                Tensor::zeros(&[channels])?,
                ParamKind::Buffer,
            )?,
            running_var: store.register(
                &format!("{name}.running_var"),
                Tensor::ones(&[channels])?,
                ParamKind::Buffer,
            )?,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the estimates.
    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        match f.mode() {
            Mode::Train => {
                let shape = f.value(x)?.shape().to_vec();
                let (y, mean, var) = f.tape_mut().batch_norm_train(x, g, b, self.epsilon)?;
                let count = (shape[0] * shape[2] * shape[3]) as f64;
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                let unbias = T::lit(count / (count - 1.0));
                let store = f.store_mut();
                for (r, &v) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * v;
                }
                for (r, &v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * v * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = f.store();
                let rm = store.get(self.running_mean).clone();
                let rv = store.get(self.running_var).clone();
                if rv.data().iter().any(|&v| v < T::zero()) {
                    return Err(TensorError::InvalidArgument("negative running variance".into()));
                }
                f.tape_mut().batch_norm_eval(x, g, b, rm.data(), rv.data(), self.epsilon)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        // Channel values 5 ± 2: mean 5, variance 4.
        let data: Vec<f64> = (0..2 * 2 * 4).map(|i| if i % 2 == 0 { 3.0 } else { 7.0 }).collect();
        let x = Tensor::new(&[2, 2, 2, 2], data).unwrap();
        let mut f = Forward::new(&mut store, Mode::Train);
        let xv = f.input(x);
        let y = bn.forward(&mut f, xv).unwrap();
        let out = f.value(y).unwrap().clone();
        for c in 0..2 {
            let vals: Vec<f64> =
                (0..2).flat_map(|n| out.data()[(n * 2 + c) * 4..(n * 2 + c + 1) * 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        drop(f);
        // Running stats moved a tenth of the way towards 5 and 4·8/7.
        assert!((store.get(bn.running_mean).data()[0] - 0.5).abs() < 1e-12);
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.1 * 32.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_with_unit_stats_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        let x = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 - 4.0).unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let xv = f.input(x.clone());
        let y = bn.forward(&mut f, xv).unwrap();
        for (a, b) in f.value(y).unwrap().data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        store.set(bn.gamma, Tensor::zeros(&[2]).unwrap()).unwrap();
        store.set(bn.beta, Tensor::new(&[2], vec![1.5, -2.0]).unwrap()).unwrap();
        let x = Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64).sin()).unwrap();
        let mut f = Forward::new(&mut store, Mode::Train);
        let xv = f.input(x);
        let y = bn.forward(&mut f, xv).unwrap();
        let out = f.value(y).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                let want = [1.5, -2.0][c];
                assert!(out.data()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn train_mode_needs_two_values_per_channel() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1).unwrap();
        let mut f = Forward::new(&mut store, Mode::Train);
        let xv = f.input(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        assert!(bn.forward(&mut f, xv).is_err());
    }

    #[test]
    fn upsample_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let up = ConvTranspose2d::new(&mut store, "up", 8, 4, &mut rng).unwrap();
        let mut f = Forward::inference(&mut store);
        let x = f.input(Tensor::ones(&[2, 8, 16, 16]).unwrap());
        let y = up.forward(&mut f, x).unwrap();
        assert_eq!(f.value(y).unwrap().shape(), &[2, 4, 32, 32]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 1, 1, 0, 1.0, &mut rng).unwrap();
        store.set(conv.weight, Tensor::ones(&[1, 1, 1, 1]).unwrap()).unwrap();
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let mut f = Forward::inference(&mut store);
        let xv = f.input(x.clone());
        let y = conv.forward(&mut f, xv).unwrap();
        assert!(f.value(y).unwrap().same_values(&x));
    }
}
