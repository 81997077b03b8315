use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: logarithm of a non-positive value")]
    NonPositiveLog(&'static str),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("parameter {index} changed shape from {before:?} to {after:?}")]
    ParamShapeChanged {
        index: usize,
        before: Vec<usize>,
        after: Vec<usize>,
    },
}
