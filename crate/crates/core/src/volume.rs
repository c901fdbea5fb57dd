//! Dense voxel containers shared by every stage of the pipeline.
//!
//! All grids use C order over `(H, W, D)` with `D` varying fastest; multi-channel
//! grids are channel-major on top of that.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::real::Real;

pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

#[inline]
pub fn coords(dims: Dims, idx: usize) -> [usize; 3] {
    let k = idx % dims[2];
    let j = (idx / dims[2]) % dims[1];
    let i = idx / (dims[1] * dims[2]);
    [i, j, k]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape(format!("dims must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Scalar image with physical voxel spacing in millimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "volume data has {} values, dims {dims:?} need {}",
                data.len(),
                voxel_count(dims)
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::invalid(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite values"));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: [f32; 3]) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Binary label grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask3D {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask3D {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "mask data has {} values, dims {dims:?} need {}",
                data.len(),
                voxel_count(dims)
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0)
    }

    pub fn ones(dims: Dims) -> Self {
        Self::filled(dims, 1)
    }

    fn filled(dims: Dims, v: u8) -> Self {
        Self {
            dims,
            data: vec![v; voxel_count(dims)],
        }
    }

    /// Builds a mask from a per-voxel predicate.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize) -> bool) -> Self {
        let data = (0..voxel_count(dims)).map(|i| f(i) as u8).collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.data[idx] == 1
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.data[idx] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// `C`-channel dense voxel grid, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    channels: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Copy> FeatureMap<T> {
    pub fn new(channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        if channels == 0 {
            return Err(Error::shape("feature map needs at least one channel"));
        }
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::shape(format!(
                "feature data has {} values, {channels}x{dims:?} needs {}",
                data.len(),
                channels * voxel_count(dims)
            )));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
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

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Embedding vector of one voxel.
    pub fn voxel(&self, idx: usize) -> Vec<T> {
        let n = self.voxels();
        (0..self.channels).map(|c| self.data[c * n + idx]).collect()
    }
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * voxel_count(dims)],
        }
    }
}

/// Two-class per-voxel probabilities (`data[c * N + v]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> ProbMap<T> {
    pub const CLASSES: usize = 2;

    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        let n = voxel_count(dims);
        if data.len() != 2 * n {
            return Err(Error::shape(format!(
                "probability map needs {} values, got {}",
                2 * n,
                data.len()
            )));
        }
        let tol = T::lit(1e-5);
        for v in 0..n {
            let (p0, p1) = (data[v], data[n + v]);
            let ok = p0 >= T::zero() && p0 <= T::one() && p1 >= T::zero() && p1 <= T::one();
            if !ok || (p0 + p1 - T::one()).abs() > tol {
                return Err(Error::invalid(format!(
                    "voxel {v} is not a probability pair ({p0}, {p1})"
                )));
            }
        }
        Ok(Self { dims, data })
    }

    /// Map assigning the same class probabilities to every voxel.
    pub fn uniform(dims: Dims, p_foreground: T) -> Self {
        let n = voxel_count(dims);
        let mut data = vec![T::one() - p_foreground; n];
        data.extend(std::iter::repeat_n(p_foreground, n));
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn class(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn p(&self, c: usize, idx: usize) -> T {
        self.data[c * self.voxels() + idx]
    }

    /// Per-voxel argmax; ties go to background.
    pub fn argmax(&self) -> Mask3D {
        let n = self.voxels();
        Mask3D::from_fn(self.dims, |v| self.data[n + v] > self.data[v])
    }
}

/// Dense single-channel grid (uncertainty, similarity, distance maps).
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Copy> Field<T> {
    pub fn new(dims: Dims, data: Vec<T>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "field data has {} values, dims {dims:?} need {}",
                data.len(),
                voxel_count(dims)
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    #[inline]
    pub fn get(&self, idx: usize) -> T {
        self.data[idx]
    }
}

/// Returns `v + eps` with `eps ~ N(0, sigma^2)` drawn per voxel from `rng`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(
    v: &Volume3D,
    sigma: f32,
    rng: &mut R,
) -> Result<Volume3D> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let data = v
        .data
        .iter()
        .map(|&x| {
            let z: f32 = rng.sample(StandardNormal);
            x + sigma * z
        })
        .collect();
    Ok(Volume3D {
        dims: v.dims,
        spacing: v.spacing,
        data,
    })
}

/// Two-class softmax with max subtraction.
pub fn softmax_over_classes<T: Real>(logits: &FeatureMap<T>) -> Result<ProbMap<T>> {
    if logits.channels() != 2 {
        return Err(Error::shape(format!(
            "softmax expects 2 classes, got {}",
            logits.channels()
        )));
    }
    let n = logits.voxels();
    let (z0, z1) = logits.data().split_at(n);
    let mut data = vec![T::zero(); 2 * n];
    for v in 0..n {
        let m = z0[v].max(z1[v]);
        let e0 = (z0[v] - m).exp();
        let e1 = (z1[v] - m).exp();
        let s = e0 + e1;
        data[v] = e0 / s;
        data[n + v] = e1 / s;
    }
    Ok(ProbMap {
        dims: logits.dims(),
        data,
    })
}

/// `sum(values * mask) / sum(mask)`, or exactly zero for an empty mask.
pub fn masked_mean<T: Real>(values: &[T], mask: &Mask3D) -> Result<T> {
    if values.len() != mask.len() {
        return Err(Error::shape(format!(
            "masked_mean: {} values vs mask of {}",
            values.len(),
            mask.len()
        )));
    }
    let mut sum = T::zero();
    let mut count = 0usize;
    for (&x, &m) in values.iter().zip(mask.data()) {
        if m == 1 {
            sum += x;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(T::zero());
    }
    Ok(sum / T::lit(count as f64))
}
