//! Squeeze-and-excitation gates: channel (cSE), spatial (sSE) and their
//! concurrent combination (scSE).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Conv2d, Forward, Linear, ParamStore};
use crate::tensor::{Float, Result, TensorError, Var};

/// How the cSE and sSE outputs are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Max,
    Add,
}

#[derive(Clone, Debug)]
pub struct ChannelSe {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl ChannelSe {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "reduction ratio {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelSe {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, 2f64.sqrt(), rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, 1.0, rng)?,
            channels,
        })
    }

    /// Per-channel gate, shape `[N, C]`.
    pub fn gate<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let n = f.value(x)?.shape()[0];
        let t = f.tape_mut();
        let pooled = t.mean_spatial(x)?;
        let flat = t.reshape(pooled, &[n, self.channels])?;
        let h = self.fc1.forward(f, flat)?;
        let h = f.tape_mut().relu(h)?;
        let z = self.fc2.forward(f, h)?;
        f.tape_mut().sigmoid(z)
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let g = self.gate(f, x)?;
        apply_channel_gate(f, x, g)
    }
}

fn apply_channel_gate<T: Float>(f: &mut Forward<T>, x: Var, gate: Var) -> Result<Var> {
    let shape = f.value(gate)?.shape().to_vec();
    let t = f.tape_mut();
    let g = t.reshape(gate, &[shape[0], shape[1], 1, 1])?;
    t.mul(x, g)
}

#[derive(Clone, Debug)]
pub struct SpatialSe {
    pub conv: Conv2d,
}

impl SpatialSe {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(SpatialSe { conv: Conv2d::new(store, &format!("{name}.conv"), channels, 1, 1, 1, 0, 1.0, rng)? })
    }

    /// Per-pixel gate shared by all channels, shape `[N, 1, H, W]`.
    pub fn gate<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let z = self.conv.forward(f, x)?;
        f.tape_mut().sigmoid(z)
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let g = self.gate(f, x)?;
        f.tape_mut().mul(x, g)
    }
}

#[derive(Clone, Debug)]
pub struct Scse {
    pub cse: ChannelSe,
    pub sse: SpatialSe,
    pub combine: Combine,
}

impl Scse {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        combine: Combine,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Scse {
            cse: ChannelSe::new(store, &format!("{name}.cse"), channels, reduction, rng)?,
            sse: SpatialSe::new(store, &format!("{name}.sse"), channels, rng)?,
            combine,
        })
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let c = self.cse.forward(f, x)?;
        let s = self.sse.forward(f, x)?;
        match self.combine {
            Combine::Max => f.tape_mut().maximum(c, s),
            Combine::Add => f.tape_mut().add(c, s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(channels: usize, combine: Combine) -> (ParamStore<f64>, Scse) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let scse = Scse::new(&mut store, "att", channels, 2, combine, &mut rng).unwrap();
        (store, scse)
    }

    fn sample(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0).unwrap()
    }

    #[test]
    fn zeroed_blocks_halve_the_input() {
        let (mut store, scse) = setup(4, Combine::Max);
        store.zero_params("att");
        let x = sample(&[2, 4, 3, 3]);
        let mut f = Forward::new(&mut store, Mode::Eval);
        let xv = f.input(x.clone());
        for y in [
            scse.cse.forward(&mut f, xv).unwrap(),
            scse.sse.forward(&mut f, xv).unwrap(),
            scse.forward(&mut f, xv).unwrap(),
        ] {
            let out = f.value(y).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.data().iter().zip(x.data()).all(|(o, i)| *o == 0.5 * i));
        }
        let g = scse.cse.gate(&mut f, xv).unwrap();
        assert_eq!(f.value(g).unwrap().shape(), &[2, 4]);
    }

    #[test]
    fn saturated_channel_gate_passes_channel_zero() {
        let (mut store, scse) = setup(4, Combine::Max);
        store.zero_params("att");
        // Only the fc2 bias of channel 0 is set: pre-sigmoid +20.
        store.set(scse.cse.fc2.bias, Tensor::new(&[4], vec![20.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let x = sample(&[1, 4, 2, 2]);
        let mut f = Forward::new(&mut store, Mode::Eval);
        let xv = f.input(x.clone());
        let y = scse.cse.forward(&mut f, xv).unwrap();
        let out = f.value(y).unwrap();
        for i in 0..4 {
            assert!((out.data()[i] - x.data()[i]).abs() < 1e-8 * x.data()[i].abs().max(1.0));
        }
    }

    #[test]
    fn spatial_gate_selects_bright_pixels() {
        let (mut store, scse) = setup(2, Combine::Max);
        store.zero_params("att");
        store.set(scse.sse.conv.weight, Tensor::new(&[1, 2, 1, 1], vec![20.0, 0.0]).unwrap()).unwrap();
        store.set(scse.sse.conv.bias, Tensor::new(&[1], vec![-20.0]).unwrap()).unwrap();
        // Channel 0 holds 2.0 or 0.0: gate sigmoid(20) or sigmoid(-20).
        let x = Tensor::new(&[1, 2, 1, 2], vec![2.0, 0.0, 5.0, 5.0]).unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let xv = f.input(x);
        let y = scse.sse.forward(&mut f, xv).unwrap();
        let out = f.value(y).unwrap().data().to_vec();
        assert!((out[0] - 2.0).abs() < 1e-6);
        assert!((out[2] - 5.0).abs() < 1e-6);
        assert!(out[3].abs() < 1e-6);
    }

    #[test]
    fn spatial_gate_is_channel_independent() {
        let (mut store, scse) = setup(4, Combine::Max);
        let x = sample(&[2, 4, 3, 3]).map(|v| v + 3.0);
        let mut f = Forward::new(&mut store, Mode::Eval);
        let xv = f.input(x.clone());
        let y = scse.sse.forward(&mut f, xv).unwrap();
        let out = f.value(y).unwrap();
        for n in 0..2 {
            for p in 0..9 {
                let r0 = out.data()[n * 36 + p] / x.data()[n * 36 + p];
                for c in 1..4 {
                    let i = n * 36 + c * 9 + p;
                    assert!((out.data()[i] / x.data()[i] - r0).abs() < 1e-12);
                }
            }
        }
    }

    /// Channel gate 0.5 (zero cSE), spatial gate 0.8 via the sSE bias.
    fn fixed_gates(combine: Combine, x: Vec<f64>) -> Vec<f64> {
        let (mut store, scse) = setup(2, combine);
        store.zero_params("att");
        let logit = (0.8f64 / 0.2).ln();
        store.set(scse.sse.conv.bias, Tensor::new(&[1], vec![logit]).unwrap()).unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let xv = f.input(Tensor::new(&[1, 2, 1, 1], x).unwrap());
        let y = scse.forward(&mut f, xv).unwrap();
        f.value(y).unwrap().data().to_vec()
    }

    #[test]
    fn combine_rules() {
        let out = fixed_gates(Combine::Max, vec![2.0, -2.0]);
        assert!((out[0] - 1.6).abs() < 1e-12);
        assert!((out[1] + 1.0).abs() < 1e-12);
        let out = fixed_gates(Combine::Add, vec![1.0, 1.0]);
        assert!((out[0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(Scse::new(&mut store, "a", 6, 4, Combine::Max, &mut rng).is_err());
        assert!(Scse::new(&mut store, "b", 1, 2, Combine::Max, &mut rng).is_err());
        assert!(Scse::new(&mut store, "c", 6, 3, Combine::Max, &mut rng).is_ok());
    }
}
