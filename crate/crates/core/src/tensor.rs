//! Dense row-major f64 tensors.
//!
//! `Tensor` is the value type used for parameters, images, and anything
//! serialized; differentiable computation happens on a [`crate::tape::Tape`].

use std::fmt;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors raised by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape extents.
    DataLength { expected: usize, got: usize },
    /// Two operands have incompatible shapes; names both.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An op got a tensor of unsupported rank.
    BadRank { op: &'static str, shape: Vec<usize> },
    /// backward() requires a scalar loss.
    NotScalar { shape: Vec<usize> },
    /// layer_norm over a single element with eps == 0.
    DegenerateVariance,
    /// A slice or gather index is out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// An op that needs at least one element got none.
    EmptyInput(&'static str),
    /// A non-finite value reached a place that requires finite input.
    NonFinite { what: String },
    /// Configuration contract violated (named parameter, bad value).
    InvalidConfig { what: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            TensorError::BadRank { op, shape } => {
                write!(f, "{op}: unsupported rank for shape {shape:?}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::DegenerateVariance => {
                write!(f, "layer_norm over a single element with eps = 0 has degenerate variance")
            }
            TensorError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            TensorError::EmptyInput(op) => write!(f, "{op}: empty input"),
            TensorError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            TensorError::InvalidConfig { what } => write!(f, "invalid configuration: {what}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense n-dimensional f64 array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Row vector [1 x d].
    pub fn row(data: Vec<f64>) -> Self {
        let d = data.len();
        Tensor {
            shape: vec![1, d],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rows of a 2-D tensor (1-D counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (1-D counts as its length).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => self.numel() / self.shape[0],
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |a - b| against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::DataLength { expected: 6, got: 5 });
    }

    #[test]
    fn row_and_scalar_shapes() {
        assert_eq!(Tensor::row(vec![1.0, 2.0]).shape, vec![1, 2]);
        assert_eq!(Tensor::scalar(3.0).shape, vec![1]);
    }
}
