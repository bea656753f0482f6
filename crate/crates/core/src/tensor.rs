//! Dense row-major `f32` tensors.
//!
//! Shapes follow the (channels, length, height, width) convention, with an
//! optional leading batch axis. The last axis is the fastest varying one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CdcError, Result};

/// Ordered list of positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(CdcError::InvalidShape("rank 0 shape".into()));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(CdcError::InvalidShape(format!(
                "axis {axis} has zero extent in {dims:?}"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CdcError::Overflow(dims.clone()))?;
        Ok(Shape(dims))
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
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// How a freshly allocated tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillRule {
    Zeros,
    Constant(f32),
    /// Independent uniform draws in `[lo, hi)` from a ChaCha8 stream.
    SeededUniform {
        lo: f32,
        hi: f32,
        seed: u64,
    },
}

/// Row-major offset of `coords` within `shape`.
pub fn linear_index(shape: &Shape, coords: &[usize]) -> Result<usize> {
    if coords.len() != shape.rank() {
        return Err(CdcError::ShapeMismatch(format!(
            "{} coordinates for rank-{} shape {shape}",
            coords.len(),
            shape.rank()
        )));
    }
    let mut offset = 0usize;
    for (axis, (&c, &extent)) in coords.iter().zip(shape.dims()).enumerate() {
        if c >= extent {
            return Err(CdcError::OutOfBounds {
                axis,
                coord: c,
                extent,
            });
        }
        offset = offset * extent + c;
    }
    Ok(offset)
}

/// Inverse of [`linear_index`].
pub fn unravel_index(shape: &Shape, mut offset: usize) -> Result<Vec<usize>> {
    if offset >= shape.numel() {
        return Err(CdcError::OutOfBounds {
            axis: 0,
            coord: offset,
            extent: shape.numel(),
        });
    }
    let mut coords = vec![0; shape.rank()];
    for (axis, &extent) in shape.dims().iter().enumerate().rev() {
        coords[axis] = offset % extent;
        offset /= extent;
    }
    Ok(coords)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, fill: FillRule) -> Self {
        let n = shape.numel();
        let data = match fill {
            FillRule::Zeros => vec![0.0; n],
            FillRule::Constant(v) => vec![v; n],
            FillRule::SeededUniform { lo, hi, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.random_range(lo..hi)).collect()
            }
        };
        Tensor { shape, data }
    }

    /// Convenience constructor that validates `dims` first.
    pub fn filled(dims: &[usize], fill: FillRule) -> Result<Self> {
        Ok(Self::new(Shape::new(dims.to_vec())?, fill))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::filled(dims, FillRule::Zeros)
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.numel() != data.len() {
            return Err(CdcError::ShapeMismatch(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, coords: &[usize]) -> Result<f32> {
        Ok(self.data[linear_index(&self.shape, coords)?])
    }

    pub fn set(&mut self, coords: &[usize], value: f32) -> Result<()> {
        let i = linear_index(&self.shape, coords)?;
        self.data[i] = value;
        Ok(())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(CdcError::NonFinite(format!("{what} at flat index {i}"))),
            None => Ok(()),
        }
    }

    pub fn ensure_dims(&self, dims: &[usize], what: &str) -> Result<()> {
        if self.dims() != dims {
            return Err(CdcError::ShapeMismatch(format!(
                "{what}: expected {dims:?}, got {:?}",
                self.dims()
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant_fills() {
        let t = Tensor::filled(&[2, 3], FillRule::Zeros).unwrap();
        assert_eq!(t.data(), &[0.0; 6]);
        let t = Tensor::filled(&[1, 1, 1, 1], FillRule::Constant(5.0)).unwrap();
        assert_eq!(t.data(), &[5.0]);
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let fill = FillRule::SeededUniform {
            lo: -1.0,
            hi: 1.0,
            seed: 7,
        };
        let a = Tensor::filled(&[4], fill).unwrap();
        let b = Tensor::filled(&[4], fill).unwrap();
        let bytes = |t: &Tensor| -> Vec<u32> { t.data().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bytes(&a), bytes(&b));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![3, 0]).is_err());
        assert!(matches!(
            Shape::new(vec![usize::MAX, 2]),
            Err(CdcError::Overflow(_))
        ));
    }

    #[test]
    fn linear_index_examples() {
        let s = Shape::new(vec![2, 3]).unwrap();
        assert_eq!(linear_index(&s, &[0, 0]).unwrap(), 0);
        assert_eq!(linear_index(&s, &[1, 2]).unwrap(), 5);
        assert!(linear_index(&s, &[2, 0]).is_err());
        assert!(linear_index(&s, &[0]).is_err());
    }

    #[test]
    fn linear_index_matches_enumeration() {
        let s = Shape::new(vec![2, 3, 4]).unwrap();
        let mut pos = 0;
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(linear_index(&s, &[i, j, k]).unwrap(), pos);
                    assert_eq!(unravel_index(&s, pos).unwrap(), vec![i, j, k]);
                    pos += 1;
                }
            }
        }
        assert_eq!(linear_index(&s, &[1, 2, 3]).unwrap(), 23);
    }

    #[test]
    fn strides_are_row_major() {
        let s = Shape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(s.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn non_finite_detected() {
        let mut t = Tensor::zeros(&[3]).unwrap();
        assert!(t.ensure_finite("t").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(t.ensure_finite("t").is_err());
    }
}
