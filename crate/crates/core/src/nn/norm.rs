use super::{join, Module, Param};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Per-channel batch normalization over `(batch, voxels)` with running
/// averages for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], 0.0),
            running_var: Param::buffer(&[channels], 1.0),
            momentum: 0.1,
            cache: None,
        }
    }

    /// With `batch_stats` the layer normalizes with statistics of `x` and
    /// updates the running averages; otherwise it uses the running averages.
    pub fn forward(&mut self, x: &Tensor, batch_stats: bool, cache: bool) -> Tensor {
        let [n, c, ..] = x.shape();
        let v = x.voxels();
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if batch_stats {
                let count = (n * v) as f64;
                let mut s = 0.0;
                for b in 0..n {
                    s += x.channel(b, ch).iter().map(|&t| t as f64).sum::<f64>();
                }
                let mean = s / count;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += x.channel(b, ch).iter().map(|&t| (t as f64 - mean).powi(2)).sum::<f64>();
                }
                let var = ss / count;
                let unbiased = if count > 1.0 { ss / (count - 1.0) } else { var };
                let m = self.momentum;
                let rm = &mut self.running_mean.value[ch];
                *rm = ((1.0 - m) * *rm as f64 + m * mean) as f32;
                let rv = &mut self.running_var.value[ch];
                *rv = ((1.0 - m) * *rv as f64 + m * unbiased) as f32;
                (mean, var)
            } else {
                (self.running_mean.value[ch] as f64, self.running_var.value[ch] as f64)
            };
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[ch] = istd;
            for b in 0..n {
                let src = x.channel(b, ch);
                let dst = y.channel_mut(b, ch);
                for (o, &t) in dst.iter_mut().zip(src) {
                    *o = ((t as f64 - mean) * istd) as f32;
                }
            }
        }
        let xhat = y.clone();
        for ch in 0..c {
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                y.channel_mut(b, ch).iter_mut().for_each(|o| *o = *o * g + bt);
            }
        }
        self.cache = cache.then_some(BnCache { xhat, inv_std, batch_stats });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std, batch_stats } =
            self.cache.take().expect("batch norm backward without cached forward");
        let [n, c, ..] = dy.shape();
        let count = (n * dy.voxels()) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                for (&g, &xh) in dy.channel(b, ch).iter().zip(xhat.channel(b, ch)) {
                    sum_dy += g as f64;
                    sum_dy_xhat += g as f64 * xh as f64;
                }
            }
            self.beta.grad[ch] += sum_dy as f32;
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            let gamma = self.gamma.value[ch] as f64;
            let scale = gamma * inv_std[ch];
            for b in 0..n {
                let dst = dx.channel_mut(b, ch);
                for ((o, &g), &xh) in dst.iter_mut().zip(dy.channel(b, ch)).zip(xhat.channel(b, ch)) {
                    *o = if batch_stats {
                        (scale * (g as f64 - sum_dy / count - xh as f64 * sum_dy_xhat / count)) as f32
                    } else {
                        (scale * g as f64) as f32
                    };
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Saved state of a parameter-free instance normalization.
#[derive(Clone, Debug)]
pub struct InstanceStats {
    pub xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Standardizes every `(sample, channel)` map to zero mean and unit variance.
pub fn instance_norm(x: &Tensor) -> InstanceStats {
    let [n, c, ..] = x.shape();
    let v = x.voxels() as f64;
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let src = x.channel(b, ch);
            let mean = src.iter().map(|&t| t as f64).sum::<f64>() / v;
            let var = src.iter().map(|&t| (t as f64 - mean).powi(2)).sum::<f64>() / v;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std.push(istd);
            for (o, &t) in xhat.channel_mut(b, ch).iter_mut().zip(src) {
                *o = ((t as f64 - mean) * istd) as f32;
            }
        }
    }
    InstanceStats { xhat, inv_std }
}

pub fn instance_norm_backward(stats: &InstanceStats, dxhat: &Tensor) -> Tensor {
    let [n, c, ..] = dxhat.shape();
    let v = dxhat.voxels() as f64;
    let mut dx = Tensor::zeros(dxhat.shape());
    for b in 0..n {
        for ch in 0..c {
            let g = dxhat.channel(b, ch);
            let xh = stats.xhat.channel(b, ch);
            let sum_g: f64 = g.iter().map(|&t| t as f64).sum();
            let sum_gx: f64 = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
            let istd = stats.inv_std[b * c + ch];
            for ((o, &gi), &xi) in dx.channel_mut(b, ch).iter_mut().zip(g).zip(xh) {
                *o = (istd * (gi as f64 - sum_g / v - xi as f64 * sum_gx / v)) as f32;
            }
        }
    }
    dx
}
