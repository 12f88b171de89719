//! U-Net with residual stages.
//!
//! ```text
//! stem: conv3x3 + BN + ReLU                     in_channels -> base
//! enc[0]: block, stride 1                       base
//! enc[l]: block, /2                             base·2^l          (l = 1..depth-1)
//! bottleneck: block, /2                         base·2^depth
//! dec[l]: up 2x (C -> C/2), concat skip, block  -> base·2^l       (l = depth-1..0)
//! head: conv1x1                                 base -> num_classes
//! ```
//!
//! The stem keeps every residual block at two or more channels, which makes
//! the multiset of scSE widths the same for all attention strategies.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    BatchNorm2d, Combine, Conv2d, ConvTranspose2d, Forward, Mode, ParamStore, ResidualBlock, StrategyKind,
};
use crate::tensor::{Float, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

/// Upper bound on `base_channels · 2^depth`, the bottleneck width.
pub const MAX_BOTTLENECK_CHANNELS: usize = 2048;

/// How encoder stages halve the resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downsample {
    /// Stride-2 first convolution and 1x1 stride-2 projection.
    #[default]
    Strided,
    /// 2x2 max pooling in front of a stride-1 block.
    Maxpool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub strategy: StrategyKind,
    pub depth: usize,
    pub base_channels: usize,
    pub reduction_ratio: usize,
    pub combine: Combine,
    pub in_channels: usize,
    pub num_classes: usize,
    pub downsample: Downsample,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            strategy: StrategyKind::Post,
            depth: 4,
            base_channels: 16,
            reduction_ratio: 2,
            combine: Combine::Max,
            in_channels: 1,
            num_classes: 2,
            downsample: Downsample::Strided,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        let widest = 1usize
            .checked_shl(self.depth as u32)
            .and_then(|s| s.checked_mul(self.base_channels))
            .filter(|&w| w <= MAX_BOTTLENECK_CHANNELS);
        if widest.is_none() {
            return fail(format!("base_channels·2^depth exceeds the maximum of {MAX_BOTTLENECK_CHANNELS}"));
        }
        if !(2..=256).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.strategy != StrategyKind::None {
            let r = self.reduction_ratio;
            if r == 0 || !self.base_channels.is_multiple_of(r) || self.base_channels / r == 0 {
                return fail(format!("reduction ratio {r} must divide base_channels {}", self.base_channels));
            }
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Layer descriptors; the values live in the model's [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub encoder: Vec<ResidualBlock>,
    pub bottleneck: ResidualBlock,
    pub upsample: Vec<ConvTranspose2d>,
    pub decoder: Vec<ResidualBlock>,
    pub head: Conv2d,
    downsample: Downsample,
}

impl Network {
    fn down<T: Float>(&self, f: &mut Forward<T>, block: &ResidualBlock, x: Var) -> Result<Var> {
        let x = match self.downsample {
            Downsample::Strided => x,
            Downsample::Maxpool => f.tape_mut().maxpool2x2(x)?,
        };
        Ok(block.forward(f, x)?)
    }

    /// Logits `[N, num_classes, H, W]` for `x: [N, in_channels, H, W]`.
    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(f, x)?;
        let h = self.stem_bn.forward(f, h)?;
        let mut h = f.tape_mut().relu(h)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (level, block) in self.encoder.iter().enumerate() {
            h = if level == 0 { block.forward(f, h)? } else { self.down(f, block, h)? };
            skips.push(h);
        }
        h = self.down(f, &self.bottleneck, h)?;
        // Decoder stages are stored deepest first.
        for ((up, block), skip) in self.upsample.iter().zip(&self.decoder).zip(skips.iter().rev()) {
            let u = up.forward(f, h)?;
            let cat = f.tape_mut().concat_channels(u, *skip)?;
            h = block.forward(f, cat)?;
        }
        Ok(self.head.forward(f, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    config: ModelConfig,
    network: Network,
    params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    /// Builds the network with seeded fan-in normal initialization.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let (strategy, r, comb) = (config.strategy, config.reduction_ratio, config.combine);
        let base = config.base_channels;
        let he = 2f64.sqrt();
        let down_stride = match config.downsample {
            Downsample::Strided => 2,
            Downsample::Maxpool => 1,
        };

        let stem = Conv2d::new(s, "stem.conv", config.in_channels, base, 3, 1, 1, he, &mut rng)?;
        let stem_bn = BatchNorm2d::new(s, "stem.bn", base)?;
        let mut encoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let cout = base << level;
            let (cin, stride) = if level == 0 { (base, 1) } else { (cout / 2, down_stride) };
            let name = format!("enc{level}");
            encoder.push(ResidualBlock::new(s, &name, cin, cout, stride, strategy, r, comb, &mut rng)?);
        }
        let widest = base << config.depth;
        let bottleneck =
            ResidualBlock::new(s, "bottleneck", widest / 2, widest, down_stride, strategy, r, comb, &mut rng)?;
        let mut upsample = Vec::with_capacity(config.depth);
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let c = base << level;
            upsample.push(ConvTranspose2d::new(s, &format!("up{level}"), 2 * c, c, &mut rng)?);
            decoder.push(ResidualBlock::new(s, &format!("dec{level}"), 2 * c, c, 1, strategy, r, comb, &mut rng)?);
        }
        let head = Conv2d::new(s, "head", base, config.num_classes, 1, 1, 0, 1.0, &mut rng)?;
        let network =
            Network { stem, stem_bn, encoder, bottleneck, upsample, decoder, head, downsample: config.downsample };
        Ok(Model { config, network, params: store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Split borrow for driving a [`Forward`] pass by hand.
    pub fn parts_mut(&mut self) -> (&Network, &mut ParamStore<T>) {
        (&self.network, &mut self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.spatial_multiple();
        match *shape {
            [_, c, h, w] if c == self.config.in_channels && h % m == 0 && w % m == 0 => Ok(()),
            [_, c, h, w] if c == self.config.in_channels => {
                Err(Error::Data(format!("spatial size {h}x{w} is not divisible by {m}")))
            }
            _ => Err(Error::Data(format!("expected input [N, {}, H, W], got {shape:?}", self.config.in_channels))),
        }
    }

    /// Logits without recording gradients. Train mode still updates the
    /// batch-norm running statistics.
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let (network, params) = self.parts_mut();
        let mut f = match mode {
            Mode::Eval => Forward::inference(params),
            Mode::Train => Forward::new(params, Mode::Train),
        };
        let xv = f.input(x.detach());
        let y = network.forward(&mut f, xv)?;
        Ok(f.value(y)?.detach())
    }

    /// Eval-mode class map `[N, H, W]`.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<u8>> {
        let logits = self.logits(x, Mode::Eval)?;
        predict_mask(&logits)
    }
}

/// Per-pixel argmax over the class axis; ties go to the lowest class.
pub fn predict_mask<T: Float>(logits: &Tensor<T>) -> Result<Tensor<u8>> {
    if logits.ndim() != 4 {
        return Err(Error::Data(format!("logits must be [N, K, H, W], got {:?}", logits.shape())));
    }
    Ok(logits.argmax(1)?)
}
