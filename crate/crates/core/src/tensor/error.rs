use super::DType;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{len} values do not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: unsupported dtype {dtype}")]
    UnsupportedDtype { op: &'static str, dtype: DType },
    #[error("axis {axis} out of range for a {ndim}-d tensor")]
    AxisOutOfRange { axis: usize, ndim: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor does not require gradients")]
    Detached,
    #[error("variable does not belong to this computation record")]
    ForeignVar,
    #[error("{0}")]
    InvalidArgument(String),
}
