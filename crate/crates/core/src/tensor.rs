//! Dense row-major tensor.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{numeric_err, shape_err, Result};

/// Scalar type of every tensor. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: Real) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[Real] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<Real> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected rank-3 tensor, got shape {:?}", self.shape)),
        }
    }

    /// Interprets the tensor as `[H, W]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((h, w)),
            _ => Err(shape_err!("expected rank-2 tensor, got shape {:?}", self.shape)),
        }
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> Real {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn at2(&self, y: usize, x: usize) -> Real {
        self.data[y * self.shape[1] + x]
    }

    /// Channel `c` of a `[C, H, W]` tensor as a flat slice.
    pub fn channel(&self, c: usize) -> &[Real] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Real, Real) -> Real) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: Real, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0, |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("shape mismatch: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors if any value is NaN or infinite.
    pub fn check_finite(self, what: &str) -> Result<Self> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(numeric_err!("{} produced non-finite value {} at {}", what, self.data[i], i));
        }
        Ok(self)
    }

    /// Index of the largest value; first occurrence wins on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, Real)> = None;
        for (i, &v) in self.data.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
