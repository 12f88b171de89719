//! Layers and the parameter registry they draw from.
//!
//! Layers are plain descriptors holding [`ParamId`]s. A [`Forward`] pass binds
//! the parameters it touches onto its tape lazily, so a single registry can
//! serve any number of passes.

mod attention;
mod layers;
mod residual;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Float, Result, Tape, Tensor, TensorError, Var};

pub use attention::{ChannelSe, Combine, Scse, SpatialSe};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear, BN_EPSILON, BN_MOMENTUM};
pub use residual::{ResidualBlock, StrategyKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable parameters are optimized; buffers (batch-norm running
/// statistics) are state that only the forward pass updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T: Float> {
    name: String,
    kind: ParamKind,
    value: Tensor<T>,
}

/// Ordered, uniquely named collection of parameters and buffers.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Float> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.to_string(), kind, value: value.detach() });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set parameter",
                detail: format!("{} is {:?}, got {:?}", entry.name, entry.value.shape(), value.shape()),
            });
        }
        entry.value = value.detach();
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    /// Sets every trainable parameter whose name starts with `prefix` to zero.
    pub fn zero_params(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.kind == ParamKind::Trainable && e.name.starts_with(prefix) {
                e.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Zero-mean normal tensor with the given standard deviation.
pub(crate) fn normal_tensor<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// One forward evaluation against a [`ParamStore`].
pub struct Forward<'s, T: Float> {
    tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    mode: Mode,
    track_params: bool,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Float> Forward<'s, T> {
    /// A pass whose trainable parameters receive gradients.
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Self::build(store, mode, true)
    }

    /// An eval-mode pass that records no backward rules for parameters.
    pub fn inference(store: &'s mut ParamStore<T>) -> Self {
        Self::build(store, Mode::Eval, false)
    }

    fn build(store: &'s mut ParamStore<T>, mode: Mode, track_params: bool) -> Self {
        let bound = vec![None; store.len()];
        Forward { tape: Tape::new(), store, mode, track_params, bound }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.tape.leaf(tensor)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        self.tape.value(var)
    }

    /// The tape handle of a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let track = self.track_params && self.store.kind(id) == ParamKind::Trainable;
        let value = self.store.get(id).clone().with_requires_grad(track);
        let v = self.tape.leaf(value);
        self.bound[id.0] = Some(v);
        v
    }

    /// Runs the reverse pass and returns the gradient of every trainable
    /// parameter the pass touched, indexed by [`ParamId`].
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        self.tape.backward(loss)?;
        let mut grads = vec![None; self.bound.len()];
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.tape.grad(*v)? {
                    grads[i] = Some(g.to_vec());
                }
            }
        }
        Ok(grads)
    }

    pub fn grad(&self, var: Var) -> Result<Option<&[T]>> {
        self.tape.grad(var)
    }
}
