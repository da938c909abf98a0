//! Dense channels-first tensors backed by flat `Vec` storage.
//!
//! Shapes are dynamic: `(c, h, w)` for activations, `(co, ci, k, k)` for conv
//! weights, `[n]` for vectors and scalars. Allocation and deallocation feed
//! the profiler's live-byte tracker when a measurement session is active.

use crate::num::Scalar;
use crate::profiler::track;
use std::mem::ManuallyDrop;

#[derive(Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match data length {}", data.len());
        track::alloc(data.len() * std::mem::size_of::<T>());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); n])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![1], vec![value])
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret the shape as `(c, h, w)`.
    #[inline]
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected 3-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Consume the tensor, returning the raw storage.
    pub fn into_data(self) -> Vec<T> {
        let mut t = ManuallyDrop::new(self);
        track::free(t.data.len() * std::mem::size_of::<T>());
        std::mem::take(&mut t.data)
    }

    /// Reinterpret storage under a new shape of equal element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {shape:?} incompatible with {:?}", self.shape);
        self.shape = shape;
        self
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x] = v;
    }

    /// Channel plane `c` of a `(c, h, w)` tensor.
    #[inline]
    pub fn plane(&self, c: usize) -> &[T] {
        let (_, h, w) = self.dims3();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let (_, h, w) = self.dims3();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn abs_max(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Convert element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T> Drop for Tensor<T> {
    fn drop(&mut self) {
        track::free(self.data.len() * std::mem::size_of::<T>());
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::from_vec(self.shape.clone(), self.data.clone())
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
