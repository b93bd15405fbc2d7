//! Dense row-major tensors.
//!
//! Feature volumes are stored channels-last: a 3D volume is
//! `[depth, height, width, channels]`, a 2D map `[height, width, channels]`.
//! The last axis is always the channel axis, so one voxel's feature vector is
//! a contiguous slice.

use crate::error::{shape_err, Result};

/// Maximum tensor order (3 spatial axes, channels, optional batch).
pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; meant for shapes known to be valid.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Every axis except the trailing channel axis.
    pub fn spatial(&self) -> &[usize] {
        &self.shape[..self.shape.len() - 1]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    /// Concatenate along the channel axis. All parts must share spatial extents.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| crate::TensorError::Shape("concat of zero tensors".into()))?;
        let spatial = first.spatial().to_vec();
        for p in parts {
            if p.spatial() != spatial.as_slice() {
                return shape_err(format!(
                    "concat spatial mismatch: {:?} vs {:?}",
                    p.spatial(),
                    spatial
                ));
            }
        }
        let total: usize = parts.iter().map(|p| p.channels()).sum();
        let sites: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(sites * total);
        for s in 0..sites {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[s * c..(s + 1) * c]);
            }
        }
        let mut shape = spatial;
        shape.push(total);
        Self::new(&shape, data)
    }

    /// Copy channels `[start, start + count)` out of every site.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Self> {
        let c = self.channels();
        if start + count > c || count == 0 {
            return shape_err(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + count
            ));
        }
        let sites = self.len() / c;
        let mut data = Vec::with_capacity(sites * count);
        for s in 0..sites {
            data.extend_from_slice(&self.data[s * c + start..s * c + start + count]);
        }
        let mut shape = self.spatial().to_vec();
        shape.push(count);
        Self::new(&shape, data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return shape_err(format!(
            "tensor order must be 1..={MAX_RANK}, got {}",
            shape.len()
        ));
    }
    if shape.iter().any(|&e| e == 0) {
        return shape_err(format!("zero extent in shape {shape:?}"));
    }
    Ok(())
}
