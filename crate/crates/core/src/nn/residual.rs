use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Combine, Conv2d, Forward, ParamStore, Scse};
use crate::tensor::{Float, Result, TensorError, Var};

/// Where a residual block applies its scSE gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// No attention.
    None,
    /// On the residual branch output, before the merge.
    Standard,
    /// On the residual branch input.
    Pre,
    /// After the merge, before the final ReLU.
    Post,
    /// On the skip branch.
    Identity,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] =
        [StrategyKind::None, StrategyKind::Standard, StrategyKind::Pre, StrategyKind::Post, StrategyKind::Identity];

    pub fn key(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Standard => "standard",
            StrategyKind::Pre => "pre",
            StrategyKind::Post => "post",
            StrategyKind::Identity => "identity",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::None => "Without-scSE",
            StrategyKind::Standard => "Standard-scSE",
            StrategyKind::Pre => "scSE-PRE",
            StrategyKind::Post => "scSE-POST",
            StrategyKind::Identity => "scSE-Identity",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for StrategyKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.key().eq_ignore_ascii_case(s) || k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| TensorError::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

/// Conv3x3-BN-ReLU-Conv3x3-BN branch plus a skip (identity, or 1x1 conv + BN
/// when the channel count or resolution changes), merged by addition and a
/// final ReLU, with an optional scSE gate placed per [`StrategyKind`].
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
    pub scse: Option<Scse>,
    pub strategy: StrategyKind,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        strategy: StrategyKind,
        reduction: usize,
        combine: Combine,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let he = 2f64.sqrt();
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, he, rng)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), cout)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, he, rng)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), cout)?;
        let projection = if cin != cout || stride != 1 {
            Some((
                Conv2d::new(store, &format!("{name}.proj"), cin, cout, 1, stride, 0, 1.0, rng)?,
                BatchNorm2d::new(store, &format!("{name}.proj_bn"), cout)?,
            ))
        } else {
            None
        };
        let scse_channels = match strategy {
            StrategyKind::None => None,
            StrategyKind::Pre => Some(cin),
            _ => Some(cout),
        };
        let scse =
            scse_channels.map(|c| Scse::new(store, &format!("{name}.scse"), c, reduction, combine, rng)).transpose()?;
        Ok(ResidualBlock { conv1, bn1, conv2, bn2, projection, scse, strategy })
    }

    fn gate<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        self.scse.as_ref().expect("strategy with attention has an scSE block").forward(f, x)
    }

    fn branch<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.tape_mut().relu(h)?;
        let h = self.conv2.forward(f, h)?;
        self.bn2.forward(f, h)
    }

    fn skip<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        match &self.projection {
            None => Ok(x),
            Some((conv, bn)) => {
                let h = conv.forward(f, x)?;
                bn.forward(f, h)
            }
        }
    }

    pub fn forward<T: Float>(&self, f: &mut Forward<T>, x: Var) -> Result<Var> {
        let merged = match self.strategy {
            StrategyKind::None => {
                let r = self.branch(f, x)?;
                let s = self.skip(f, x)?;
                f.tape_mut().add(r, s)?
            }
            StrategyKind::Standard => {
                let r = self.branch(f, x)?;
                let r = self.gate(f, r)?;
                let s = self.skip(f, x)?;
                f.tape_mut().add(r, s)?
            }
            StrategyKind::Pre => {
                let g = self.gate(f, x)?;
                let r = self.branch(f, g)?;
                let s = self.skip(f, x)?;
                f.tape_mut().add(r, s)?
            }
            StrategyKind::Post => {
                let r = self.branch(f, x)?;
                let s = self.skip(f, x)?;
                let sum = f.tape_mut().add(r, s)?;
                self.gate(f, sum)?
            }
            StrategyKind::Identity => {
                let r = self.branch(f, x)?;
                let s = self.skip(f, x)?;
                let s = self.gate(f, s)?;
                f.tape_mut().add(r, s)?
            }
        };
        f.tape_mut().relu(merged)
    }
}
