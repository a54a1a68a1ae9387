//! Shared encoder producing the healthy/disease bottleneck pair and the skip
//! features.
//!
//! Blocks `0..=n_levels` each apply convolution, batch normalization and
//! ReLU; block 0 keeps the input resolution, every later block halves it
//! with a stride-2 convolution. Outputs of blocks `0..n_levels` are the skip
//! features, the output of block `n_levels` is the bottleneck. The last
//! `branch_blocks` blocks are instantiated twice, once per branch, so the
//! healthy latent `z_h` and the disease latent `z_d` come from separate
//! parameters on top of a shared trunk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, ConvBnRelu, Mode, Module, Param};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_levels: usize,
    pub latent_channels: usize,
    /// Number of deepest blocks duplicated per branch (1 = split right at
    /// the bottleneck).
    pub branch_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { in_channels: 1, base_channels: 8, n_levels: 4, latent_channels: 32, branch_blocks: 1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels < 2 {
            return Err(Error::Config("n_levels must be >= 2".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.branch_blocks < 1 || self.branch_blocks > self.n_levels {
            return Err(Error::Config(format!("branch_blocks must be in 1..={}", self.n_levels)));
        }
        Ok(())
    }

    /// Channels of skip level `i`.
    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Output channels of encoder block `b` (the bottleneck block last).
    pub fn block_channels(&self, b: usize) -> usize {
        if b == self.n_levels {
            self.latent_channels
        } else {
            self.level_channels(b)
        }
    }

    /// Index of the first branch-private block.
    pub fn first_branch_block(&self) -> usize {
        self.n_levels + 1 - self.branch_blocks
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        let f = 1usize << self.n_levels;
        if spatial.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(Error::Config(format!(
                "input shape {spatial:?} is not divisible by 2^{} = {f}",
                self.n_levels
            )));
        }
        Ok(())
    }

    pub fn bottleneck_side(&self, side: usize) -> usize {
        side >> self.n_levels
    }
}

/// `z_h` and `z_d`, each `(batch, latent_channels, d, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub z_h: Tensor,
    pub z_d: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Skip {
    Shared(Tensor),
    Split { healthy: Tensor, disease: Tensor },
}

/// Per-level skip features, highest resolution first.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipStack {
    pub levels: Vec<Skip>,
}

impl SkipStack {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn disease(&self, i: usize) -> &Tensor {
        match &self.levels[i] {
            Skip::Shared(t) | Skip::Split { disease: t, .. } => t,
        }
    }

    pub fn healthy(&self, i: usize) -> &Tensor {
        match &self.levels[i] {
            Skip::Shared(t) | Skip::Split { healthy: t, .. } => t,
        }
    }

    /// Replaces every tensor at `level` with zeros.
    pub fn zero_level(&mut self, level: usize) {
        let zero = |t: &mut Tensor| t.data_mut().fill(0.0);
        match &mut self.levels[level] {
            Skip::Shared(t) => zero(t),
            Skip::Split { healthy, disease } => {
                zero(healthy);
                zero(disease);
            }
        }
    }
}

/// Gradients arriving at the encoder outputs. `None` entries contribute
/// nothing.
#[derive(Debug, Default)]
pub struct EncoderGrads {
    pub z_h: Option<Tensor>,
    pub z_d: Option<Tensor>,
    pub seg_skips: Vec<Option<Tensor>>,
    pub img_skips: Vec<Option<Tensor>>,
}

fn add_opt(acc: &mut Option<Tensor>, g: Option<&Tensor>) {
    if let Some(g) = g {
        match acc {
            Some(a) => a.add_assign(g),
            None => *acc = Some(g.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub trunk: Vec<ConvBnRelu>,
    pub disease: Vec<ConvBnRelu>,
    /// Absent for single-bottleneck baselines, where `z_h` aliases `z_d`.
    pub healthy: Option<Vec<ConvBnRelu>>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, dual: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = |b: usize, rng: &mut ChaCha8Rng| {
            let cin = if b == 0 { cfg.in_channels } else { cfg.block_channels(b - 1) };
            ConvBnRelu::new(cin, cfg.block_channels(b), if b == 0 { 1 } else { 2 }, rng)
        };
        let first = cfg.first_branch_block();
        let trunk = (0..first).map(|b| block(b, &mut rng)).collect();
        let disease = (first..=cfg.n_levels).map(|b| block(b, &mut rng)).collect();
        let healthy = dual.then(|| (first..=cfg.n_levels).map(|b| block(b, &mut rng)).collect());
        Ok(Encoder { cfg: cfg.clone(), trunk, disease, healthy })
    }

    pub fn is_dual(&self) -> bool {
        self.healthy.is_some()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(LatentPair, SkipStack)> {
        self.cfg.check_input(x.spatial())?;
        if x.channels() != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "encoder expects {} input channels, got {}",
                self.cfg.in_channels,
                x.channels()
            )));
        }
        let n = self.cfg.n_levels;
        let mut levels = Vec::with_capacity(n);
        let mut h = x.clone();
        for blk in &mut self.trunk {
            h = blk.forward(&h, mode);
            levels.push(Skip::Shared(h.clone()));
        }
        let run_branch = |blocks: &mut Vec<ConvBnRelu>, input: &Tensor| {
            let mut outs = Vec::with_capacity(blocks.len());
            let mut t = input.clone();
            for blk in blocks.iter_mut() {
                t = blk.forward(&t, mode);
                outs.push(t.clone());
            }
            outs
        };
        let mut d_outs = run_branch(&mut self.disease, &h);
        let z_d = d_outs.pop().expect("branch has at least one block");
        let (z_h, h_outs) = match self.healthy.as_mut() {
            Some(hb) => {
                let mut outs = run_branch(hb, &h);
                (outs.pop().expect("branch has at least one block"), Some(outs))
            }
            None => (z_d.clone(), None),
        };
        match h_outs {
            Some(h_outs) => levels.extend(
                h_outs.into_iter().zip(d_outs).map(|(healthy, disease)| Skip::Split { healthy, disease }),
            ),
            None => levels.extend(d_outs.into_iter().map(Skip::Shared)),
        }
        if !z_h.is_finite() || !z_d.is_finite() {
            return Err(Error::Numeric("non-finite encoder activation".into()));
        }
        Ok((LatentPair { z_h, z_d }, SkipStack { levels }))
    }

}

fn at(v: &[Option<Tensor>], i: usize) -> Option<&Tensor> {
    v.get(i).and_then(|g| g.as_ref())
}

impl Encoder {
    /// Backpropagates through the encoder after a training-mode forward.
    pub fn backward(&mut self, grads: EncoderGrads) {
        let n = self.cfg.n_levels;
        let first = self.cfg.first_branch_block();
        let mut into_trunk = None;
        match self.healthy.as_mut() {
            Some(healthy) => {
                let g = branch_backward(&mut self.disease, first, n, grads.z_d, |i| {
                    at(&grads.seg_skips, i).cloned()
                });
                add_opt(&mut into_trunk, g.as_ref());
                let g = branch_backward(healthy, first, n, grads.z_h, |i| at(&grads.img_skips, i).cloned());
                add_opt(&mut into_trunk, g.as_ref());
            }
            None => {
                // z_h aliases z_d and every skip level is shared
                let mut top = grads.z_d;
                add_opt(&mut top, grads.z_h.as_ref());
                let g = branch_backward(&mut self.disease, first, n, top, |i| {
                    let mut acc = at(&grads.seg_skips, i).cloned();
                    add_opt(&mut acc, at(&grads.img_skips, i));
                    acc
                });
                add_opt(&mut into_trunk, g.as_ref());
            }
        }
        let mut g = into_trunk;
        for (i, blk) in self.trunk.iter_mut().enumerate().rev() {
            add_opt(&mut g, at(&grads.seg_skips, i));
            add_opt(&mut g, at(&grads.img_skips, i));
            g = g.and_then(|gt| blk.backward(gt, i > 0));
        }
    }
}

/// Branch block `k` produces level `first + k`; the last one produces the
/// latent. Returns the gradient at the branch input, or `None` when nothing
/// reached the branch.
fn branch_backward(
    blocks: &mut [ConvBnRelu],
    first: usize,
    n_levels: usize,
    top: Option<Tensor>,
    skip_grad: impl Fn(usize) -> Option<Tensor>,
) -> Option<Tensor> {
    let mut g = top;
    for (k, blk) in blocks.iter_mut().enumerate().rev() {
        let level = first + k;
        if level < n_levels {
            add_opt(&mut g, skip_grad(level).as_ref());
        }
        g = g.and_then(|gt| blk.backward(gt, true));
    }
    g
}

impl Module for Encoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.trunk.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("trunk{i}")), f);
        }
        for (i, b) in self.disease.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("disease{i}")), f);
        }
        if let Some(hb) = self.healthy.as_mut() {
            for (i, b) in hb.iter_mut().enumerate() {
                b.visit(&join(prefix, &format!("healthy{i}")), f);
            }
        }
    }
}
