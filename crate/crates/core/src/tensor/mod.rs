//! Dense row-major tensors and the reverse-mode tape that differentiates them.
//!
//! Storage is generic over [`Element`] so the same kernels run in `f32` for
//! training and in `f64` for finite-difference checks. Reductions and the
//! convolution/matmul inner loops always accumulate in `f64`.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::fmt::Debug;

use num_traits::Float;

use crate::{Error, Result};

pub use gradcheck::{finite_difference_check, finite_difference_check_at};
pub use tape::{Graph, Var};

/// Scalar storage type of a [`Tensor`].
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
}

impl Element for f32 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline(always)]
    fn widen(self) -> f64 {
        self
    }
    #[inline(always)]
    fn narrow(v: f64) -> Self {
        v
    }
}

/// Number of elements described by `shape`; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::invalid(
                "set_grad",
                format!("gradient has {} values for shape {:?}", grad.len(), self.shape),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::narrow(v.widen())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(3.0f32);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::<f32>::zeros(vec![4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32);
        let r = t.clone().reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4]).is_err());
    }
}
