//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Only what the recognizer needs: row-major f64 tensors, a handful of
//! forward kernels (matmul, conv2d, max_pool2d, activations, log-softmax),
//! and a tape-style graph that records operations as they run and replays
//! them in reverse for gradients.

mod graph;
mod kernels;

pub use graph::{Gradients, Graph, NodeId};
pub use kernels::{conv2d, log_softmax_rows, matmul, max_pool2d, relu, sigmoid, tanh};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

/// Row-major dense tensor of f64 values. Extents are always positive;
/// rank-0 and zero-size tensors are rejected at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument {
                op: "from_vec",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "zeros: extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// The (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::InvalidArgument {
                op: "dims2",
                msg: format!("expected rank 2, got shape {:?}", self.shape),
            }),
        }
    }

    /// The (channels, height, width) of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize), TensorError> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::InvalidArgument {
                op: "dims3",
                msg: format!("expected rank 3, got shape {:?}", self.shape),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 6, got: 5, .. }));
    }

    #[test]
    fn rejects_zero_extents() {
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_single_element() {
        let t = Tensor::scalar(3.5);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.data(), &[3.5]);
    }
}
