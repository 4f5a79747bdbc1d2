use std::fmt;

use crate::error::{Error, Result};

/// Ordered list of positive extents. Video features use `[N, C, T, H, W]`.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub(crate) Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("shape", format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims))
    }

    /// Shape of a rank-0 scalar.
    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    /// Unpacks a rank-5 `[N, C, T, H, W]` shape.
    pub fn ncthw(&self, op: &'static str) -> Result<[usize; 5]> {
        match self.0[..] {
            [n, c, t, h, w] => Ok([n, c, t, h, w]),
            _ => Err(Error::shape(op, format!("expected [N, C, T, H, W], got {self}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Shape{:?}", self.0)
    }
}

/// Anything that names a shape: arrays, slices, vectors, or a [`Shape`].
pub trait IntoShape {
    fn into_shape(self) -> Result<Shape>;
}

impl IntoShape for Shape {
    fn into_shape(self) -> Result<Shape> {
        Ok(self)
    }
}

impl IntoShape for &Shape {
    fn into_shape(self) -> Result<Shape> {
        Ok(self.clone())
    }
}

impl IntoShape for &[usize] {
    fn into_shape(self) -> Result<Shape> {
        Shape::new(self.to_vec())
    }
}

impl<const R: usize> IntoShape for [usize; R] {
    fn into_shape(self) -> Result<Shape> {
        Shape::new(self.to_vec())
    }
}

impl<const R: usize> IntoShape for &[usize; R] {
    fn into_shape(self) -> Result<Shape> {
        Shape::new(self.to_vec())
    }
}

impl IntoShape for Vec<usize> {
    fn into_shape(self) -> Result<Shape> {
        Shape::new(self)
    }
}
