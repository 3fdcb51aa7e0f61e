//! Dense scalar image stacks indexed by (x, y, t).

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// A scalar image stack with `t` slowest and `x` fastest.
///
/// Used for raw renders, displayed (TAA-filtered) images and references alike.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl FrameSequence {
    pub fn zeros(dims: [usize; 3]) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims,
            values: vec![value; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn from_values(dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidInput(format!(
                "{} values do not fill a {}x{}x{} sequence",
                values.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at index {i}")));
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        check_dims(dims)?;
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for t in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(x, y, t));
                }
            }
        }
        Ok(Self { dims, values })
    }

    /// `(width, height, frames)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn frames(&self) -> usize {
        self.dims[2]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, t: usize) -> usize {
        (t * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, t: usize) -> f64 {
        self.values[self.index(x, y, t)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, t: usize, v: f64) {
        let i = self.index(x, y, t);
        self.values[i] = v;
    }

    /// One frame as a row-major `width * height` slice.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1];
        &self.values[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.dims[0] * self.dims[1];
        &mut self.values[t * n..(t + 1) * n]
    }

    pub fn same_dims(&self, other: &FrameSequence) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::InvalidInput(format!(
                "dimension mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Element-wise `self - other`.
    pub fn difference(&self, other: &FrameSequence) -> Result<FrameSequence> {
        self.same_dims(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(FrameSequence {
            dims: self.dims,
            values,
        })
    }

    /// Row-major `width * frames` slice at fixed `y`.
    pub fn xt_slice(&self, y: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims[0] * self.dims[2]);
        for t in 0..self.dims[2] {
            for x in 0..self.dims[0] {
                out.push(self.get(x, y, t));
            }
        }
        out
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidInput(format!(
            "sequence dimensions must be positive, got {:?}",
            dims
        )));
    }
    Ok(())
}

/// Perceptual error per pixel per frame. Signed.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSequence(pub FrameSequence);

impl Deref for ErrorSequence {
    type Target = FrameSequence;

    fn deref(&self) -> &FrameSequence {
        &self.0
    }
}

impl DerefMut for ErrorSequence {
    fn deref_mut(&mut self) -> &mut FrameSequence {
        &mut self.0
    }
}

/// Pairwise (cascade) summation; reproducible independent of how callers chunk work.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
