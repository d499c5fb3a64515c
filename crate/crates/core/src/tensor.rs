//! Dense row-major tensors and the scalar abstraction shared by the tape.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero or missing dimension")]
    EmptyShape(Vec<usize>),
    #[error("masked softmax row {row} has no unmasked entry")]
    DegenerateMask { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
}

/// Floating point element type a [`crate::tape::Tape`] can run on.
///
/// Parameters are stored as `f32`; gradient checking replays the same graph
/// in `f64`.
pub trait Scalar: Float + Sum + Send + Sync + Debug + Default + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(x: f32) -> Self {
        Self::of(x as f64)
    }
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::EmptyShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// A named, dense, row-major `f32` array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    name: Option<String>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            name: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn from_fn(
        shape: Vec<usize>,
        mut f: impl FnMut(usize) -> f32,
    ) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<(), TensorError> {
        if g.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                len: g.len(),
            });
        }
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at `(row, col)` of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f32 {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data[row * cols + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(
            Tensor::zeros(vec![2, 0]),
            Err(TensorError::EmptyShape(_))
        ));
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(vec![3]).unwrap().with_name("w");
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        assert_eq!(t.name(), Some("w"));
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
