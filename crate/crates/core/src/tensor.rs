//! Dense 5-D feature tensors laid out as `(batch, channel, depth, height, width)`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Data(format!(
                "tensor shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.voxels()
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

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[f32] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "tensor shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Copy of samples `[start, start + count)`.
    pub fn slice_batch(&self, start: usize, count: usize) -> Tensor {
        let len = self.sample_len();
        let mut shape = self.shape;
        shape[0] = count;
        Tensor { shape, data: self.data[start * len..(start + count) * len].to_vec() }
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(parts: &[&Tensor]) -> Tensor {
        let mut shape = parts[0].shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!(p.shape[1..], shape[1..], "tensor shape mismatch in stack");
            data.extend_from_slice(&p.data);
        }
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        Tensor { shape, data }
    }

    /// Channel-wise concatenation `[a, b]`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape[0], b.shape[0]);
        assert_eq!(a.spatial(), b.spatial());
        let (ca, cb) = (a.shape[1], b.shape[1]);
        let v = a.voxels();
        let mut out = Tensor::zeros([a.shape[0], ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
        for n in 0..a.shape[0] {
            let dst = out.sample_mut(n);
            dst[..ca * v].copy_from_slice(a.sample(n));
            dst[ca * v..].copy_from_slice(b.sample(n));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `ca` channels.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let v = self.voxels();
        let cb = self.shape[1] - ca;
        let [n, _, d, h, w] = self.shape;
        let mut a = Tensor::zeros([n, ca, d, h, w]);
        let mut b = Tensor::zeros([n, cb, d, h, w]);
        for i in 0..n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..ca * v]);
            b.sample_mut(i).copy_from_slice(&src[ca * v..]);
        }
        (a, b)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
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
    fn concat_then_split_restores_parts() {
        let a = Tensor::from_vec([2, 1, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([2, 2, 1, 1, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let cat = Tensor::concat_channels(&a, &b);
        assert_eq!(cat.shape(), [2, 3, 1, 1, 2]);
        assert_eq!(cat.sample(1), &[3.0, 4.0, 4.0, 5.0, 6.0, 7.0]);
        let (a2, b2) = cat.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}
