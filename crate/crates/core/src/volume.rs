//! Single-channel 3-D grids: intensity volumes and segmentation masks.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `(depth, height, width)` grid of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3 {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Grid3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Grid3 { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Grid3 { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() || dims.contains(&0) {
            return Err(Error::Data(format!(
                "grid dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
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

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Wraps the grid as a `(1, 1, D, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::from_vec([1, 1, d, h, w], self.data.clone()).expect("grid and tensor sizes agree")
    }

    /// Channel `c` of sample `n` as a grid.
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Self {
        Grid3 { dims: t.spatial(), data: t.channel(n, c).to_vec() }
    }
}

/// Intensity volume (input `X`, reconstructions `R` and pseudo-healthy images `P`).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume(pub Grid3);

/// Lesion mask: binary for ground truth, probabilities for predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(pub Grid3);

macro_rules! grid_newtype {
    ($t:ty) => {
        impl Deref for $t {
            type Target = Grid3;
            fn deref(&self) -> &Grid3 {
                &self.0
            }
        }

        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut Grid3 {
                &mut self.0
            }
        }
    };
}

grid_newtype!(Volume);
grid_newtype!(Mask);

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume(Grid3::zeros(dims))
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Grid3::from_vec(dims, data).map(Volume)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data().iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Data(format!("non-finite value at voxel {i}"))),
            None => Ok(()),
        }
    }
}

impl Mask {
    /// The empty mask `M_0`.
    pub fn empty(dims: [usize; 3]) -> Self {
        Mask(Grid3::zeros(dims))
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Grid3::from_vec(dims, data).map(Mask)
    }

    pub fn is_binary(&self) -> bool {
        self.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data().iter().all(|&v| v == 0.0)
    }

    /// Binarizes at `threshold` (voxels `>= threshold` become 1).
    pub fn binarize(&self, threshold: f32) -> Mask {
        let data = self.data().iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
        Mask(Grid3 { dims: self.dims(), data })
    }

    pub fn count_positive(&self) -> usize {
        self.data().iter().filter(|&&v| v > 0.0).count()
    }
}
