//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Training runs in `f32`; gradient verification instantiates the same
//! generic code in `f64` where central finite differences are trustworthy.
//! Forward operations are recorded on a [`tape::Tape`]; `backward` walks the
//! record in reverse and accumulates gradients into [`param::Parameter`]
//! buffers.

pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod tape;

use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use thiserror::Error;

pub use gradcheck::{gradcheck_fn, gradcheck_model, GradCheckReport};
pub use param::{Parameter, ParamRegistry};
pub use tape::{Tape, Var};

/// Element types the engine supports.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }
    fn to_f64s(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("no recorded graph behind the loss value")]
    NoGraph,
    #[error("{op}: {heads} heads must divide feature dim {dim}")]
    HeadsMismatch {
        op: &'static str,
        heads: usize,
        dim: usize,
    },
}

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T, TensorError> {
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// A contiguous row-major tensor. Cloning shares the underlying buffer.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![], vec![v])
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Scalar extraction; panics if the tensor is not 0-d or 1-element.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {shape:?}",
            self.shape
        );
        Self {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shapes");
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_t(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    /// In-place accumulate; reuses the buffer when uniquely owned.
    pub fn accumulate(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulate shapes");
        let data = Arc::make_mut(&mut self.data);
        for (d, s) in data.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }

    pub fn scale_t(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion (f32 <-> f64) for verification runs.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| U::of_f64(v.to_f64s())).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_agree() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic]
    fn wrong_length_panics() {
        let _ = Tensor::<f32>::new(vec![2, 3], vec![1.0; 5]);
    }

    #[test]
    fn accumulate_adds() {
        let mut a = Tensor::<f64>::from_vec(vec![1.0, 2.0]);
        let b = Tensor::<f64>::from_vec(vec![10.0, 20.0]);
        a.accumulate(&b);
        assert_eq!(a.data(), &[11.0, 22.0]);
    }

    #[test]
    fn cast_round_trip() {
        let a = Tensor::<f32>::from_vec(vec![0.5, -2.25]);
        let b: Tensor<f64> = a.cast();
        let c: Tensor<f32> = b.cast();
        assert_eq!(a.data(), c.data());
    }
}
