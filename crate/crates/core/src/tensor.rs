//! Dense row-major `f64` tensors.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// An immutable dense array of `f64` values in row-major order.
///
/// `requires_grad` only matters when the tensor is registered as a leaf on a
/// [`Tape`](crate::autodiff::Tape).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor_of",
                format!(
                    "shape {shape:?} holds {expected} elements but {} values were given",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Draws every element from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("standard deviation must be finite and >= 0");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    /// Draws every element uniformly from `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(low..high)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Element at a multi-dimensional index.
    ///
    /// Panics when the index rank or any coordinate is out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            assert!(i < extent, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * extent + i;
        }
        self.data[flat]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let Some(&outer) = self.shape.first() else {
            return Err(Error::shape("slice_outer", "rank-0 tensor"));
        };
        if start > end || end > outer {
            return Err(Error::shape(
                "slice_outer",
                format!("range {start}..{end} outside leading extent {outer}"),
            ));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(&shape, self.data[start * stride..end * stride].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::shape("stack", "nothing to stack"));
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let mut list = f.debug_list();
        list.entries(self.data.iter().take(PREVIEW));
        if self.data.len() > PREVIEW {
            list.entry(&format_args!("... {} more", self.data.len() - PREVIEW));
        }
        list.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_indexing() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert!(!t.requires_grad());
    }

    #[test]
    fn empty_tensor_is_accepted() {
        let t = Tensor::new(&[0], vec![]).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, 2.0, 3.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn slice_and_stack_are_inverse() {
        let t = Tensor::new(&[3, 2], (0..6).map(f64::from).collect()).unwrap();
        let rows: Vec<_> = (0..3)
            .map(|i| t.slice_outer(i, i + 1).unwrap().reshape(&[2]).unwrap())
            .collect();
        let refs: Vec<_> = rows.iter().collect();
        assert_eq!(Tensor::stack(&refs).unwrap(), t);
    }
}
