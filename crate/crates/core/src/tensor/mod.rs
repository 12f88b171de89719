//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Layout convention everywhere: `[batch, channel, height, width]`, row-major.
//! A [`Tensor`] is a value: cloning is cheap (storage is shared) and any
//! mutation goes through copy-on-write, so forward operations can never alter
//! their inputs. Differentiation is recorded on a [`Tape`].

mod conv;
mod element;
mod error;
pub(crate) mod gemm;
pub mod gradcheck;
mod ops;
mod tape;

use std::sync::Arc;

pub use conv::{conv2d_reference, conv_output_extent};
pub use element::{DType, Element, Float};
pub use error::TensorError;
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use tape::{Tape, Var};

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Arc<Vec<T>>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(TensorError::InvalidShape(format!("extent of axis {axis} in {shape:?} must be positive")));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data), requires_grad: false, grad: None })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = check_shape(shape)?;
        Self::new(shape, vec![value; numel])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let numel = check_shape(shape)?;
        Self::new(shape, (0..numel).map(&mut f).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![value]), requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(TensorError::ShapeMismatch {
                op: "item",
                detail: format!("expected one element, shape is {:?}", self.shape),
            }),
        }
    }

    /// Same storage under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", detail: format!("{:?} -> {shape:?}", self.shape) });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            requires_grad: false,
            grad: None,
        }
    }

    /// Bitwise equality of shape and values, ignoring gradient state.
    pub fn same_values(&self, other: &Self) -> bool
    where
        T: PartialEq,
    {
        self.shape == other.shape && self.data == other.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref().map(Vec::as_slice)
    }

    /// Flat element offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(&i, &d)| i >= d) {
            return Err(TensorError::InvalidArgument(format!(
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        Ok(index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| acc * d + i))
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    /// Index of the largest entry along `axis` for every other position.
    /// The result drops `axis`; ties go to the lowest index.
    pub fn argmax(&self, axis: usize) -> Result<Tensor<u8>>
    where
        T: PartialOrd,
    {
        if axis >= self.ndim() {
            return Err(TensorError::AxisOutOfRange { axis, ndim: self.ndim() });
        }
        let extent = self.shape[axis];
        if extent > 256 {
            return Err(TensorError::InvalidArgument(format!("argmax over {extent} entries does not fit u8 indices")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut best = 0;
                for c in 1..extent {
                    if self.data[base + c * inner] > self.data[base + best * inner] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: Arc::new(out), requires_grad: false, grad: None })
    }
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad.as_ref().map(|g| Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(g),
            requires_grad: false,
            grad: None,
        })
    }

    /// Adds `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if !self.requires_grad {
            return Err(TensorError::Detached);
        }
        if delta.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("{} gradient values for shape {:?}", delta.len(), self.shape),
            });
        }
        match &mut self.grad {
            Some(g) => {
                for (g, &d) in Arc::make_mut(g).iter_mut().zip(delta) {
                    *g += d;
                }
            }
            None => self.grad = Some(Arc::new(delta.to_vec())),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Value copy without gradient state.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), requires_grad: false, grad: None }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        self.map(|v| U::lit(v.as_f64()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dtype-erased tensor, as stored in files.
#[derive(Clone, Debug)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    /// Wraps a float tensor without changing its precision.
    pub fn from_float<T: Float>(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            _ => AnyTensor::F64(t.cast()),
        }
    }

    /// Float view in the requested precision, converting if necessary.
    pub fn to_float<T: Float>(&self) -> Result<Tensor<T>> {
        match self {
            AnyTensor::F32(t) => Ok(t.cast()),
            AnyTensor::F64(t) => Ok(t.cast()),
            AnyTensor::U8(_) => Err(TensorError::UnsupportedDtype { op: "to_float", dtype: DType::U8 }),
        }
    }

    pub fn into_u8(self) -> Result<Tensor<u8>> {
        match self {
            AnyTensor::U8(t) => Ok(t),
            other => Err(TensorError::UnsupportedDtype { op: "into_u8", dtype: other.dtype() }),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

impl From<Tensor<u8>> for AnyTensor {
    fn from(t: Tensor<u8>) -> Self {
        AnyTensor::U8(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_are_validated() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]), Err(TensorError::DataLength { .. })));
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(TensorError::InvalidShape(_))));
        assert_eq!(Tensor::scalar(3.0f64).numel(), 1);
    }

    #[test]
    fn clones_are_independent_values() {
        let a = Tensor::<f64>::ones(&[4]).unwrap();
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data(), &[1.0; 4]);
        assert_eq!(b.data()[0], 5.0);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut t = Tensor::<f64>::zeros(&[2]).unwrap().with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
        let mut frozen = Tensor::<f64>::zeros(&[2]).unwrap();
        assert!(matches!(frozen.accumulate_grad(&[1.0, 1.0]), Err(TensorError::Detached)));
    }

    #[test]
    fn argmax_over_channels_prefers_lowest_index_on_ties() {
        // [N=1, C=2, H=1, W=3]
        let logits = Tensor::new(&[1, 2, 1, 3], vec![0.2, 0.5, 0.7, 0.9, 0.5, 0.1]).unwrap();
        let idx = logits.argmax(1).unwrap();
        assert_eq!(idx.shape(), &[1, 1, 3]);
        assert_eq!(idx.data(), &[1, 0, 0]);
        assert!(matches!(logits.argmax(4), Err(TensorError::AxisOutOfRange { .. })));
    }
}
