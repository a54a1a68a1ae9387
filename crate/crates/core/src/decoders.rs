//! Segmentation decoder and the mask-conditioned image decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, SkipStack};
use crate::error::{Error, Result};
use crate::nn::{
    instance_norm, instance_norm_backward, join, sigmoid, BatchNorm3d, Conv3d, ConvBnRelu, ConvTranspose3d,
    InstanceStats, Mode, Module, Param, Relu,
};
use crate::tensor::Tensor;
use crate::volume::{Grid3, Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpadeDecoderConfig {
    /// Number of final (highest-resolution) decoding blocks without skips.
    pub skip_drop_count: usize,
    pub spade_hidden_channels: usize,
}

impl Default for SpadeDecoderConfig {
    fn default() -> Self {
        SpadeDecoderConfig { skip_drop_count: 3, spade_hidden_channels: 8 }
    }
}

impl SpadeDecoderConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.skip_drop_count > enc.n_levels {
            return Err(Error::Config(format!(
                "skip_drop_count {} exceeds n_levels {}",
                self.skip_drop_count, enc.n_levels
            )));
        }
        if self.spade_hidden_channels == 0 {
            return Err(Error::Config("spade_hidden_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_skip(&self, level: usize) -> bool {
        level >= self.skip_drop_count
    }
}

/// Average-pools a `(n, 1, D, H, W)` mask tensor to side `target`.
pub fn downsample_mask_tensor(mask: &Tensor, target: usize) -> Result<Tensor> {
    let [n, c, d, h, w] = mask.shape();
    if target == 0 || d % target != 0 || h % target != 0 || w % target != 0 || d != h || h != w {
        return Err(Error::Config(format!("cannot pool {:?} to side {target}", [d, h, w])));
    }
    let f = d / target;
    if f == 1 {
        return Ok(mask.clone());
    }
    let inv = 1.0 / (f * f * f) as f64;
    let mut out = Tensor::zeros([n, c, target, target, target]);
    for b in 0..n {
        for ch in 0..c {
            let src = mask.channel(b, ch);
            let dst = out.channel_mut(b, ch);
            for z in 0..target {
                for y in 0..target {
                    for x in 0..target {
                        let mut acc = 0.0f64;
                        for dz in 0..f {
                            for dy in 0..f {
                                let row = ((z * f + dz) * h + y * f + dy) * w + x * f;
                                acc += src[row..row + f].iter().map(|&v| v as f64).sum::<f64>();
                            }
                        }
                        dst[(z * target + y) * target + x] = (acc * inv) as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`downsample_mask_tensor`] onto a grid of side `full`.
pub fn downsample_mask_backward(dsmall: &Tensor, full: usize) -> Tensor {
    let [n, c, t, ..] = dsmall.shape();
    let f = full / t;
    let inv = 1.0 / (f * f * f) as f32;
    let mut out = Tensor::zeros([n, c, full, full, full]);
    for b in 0..n {
        for ch in 0..c {
            let src = dsmall.channel(b, ch);
            let dst = out.channel_mut(b, ch);
            for z in 0..full {
                for y in 0..full {
                    for x in 0..full {
                        dst[(z * full + y) * full + x] = src[((z / f) * t + y / f) * t + x / f] * inv;
                    }
                }
            }
        }
    }
    out
}

/// Average-pooling mask downsampling.
pub fn downsample_mask(mask: &Mask, target_side: usize) -> Result<Mask> {
    let t = downsample_mask_tensor(&mask.to_tensor(), target_side)?;
    Ok(Mask(Grid3::from_tensor(&t, 0, 0)))
}

/// Spatially adaptive normalization: `norm(x) ⊙ (1 + γ(m)) + β(m)`, where
/// `norm` is parameter-free per-channel standardization and `γ`, `β` are
/// pointwise convolutions of a shared ReLU feature map of the mask.
#[derive(Clone, Debug)]
pub struct SpadeBlock {
    pub shared: Conv3d,
    pub gamma: Conv3d,
    pub beta: Conv3d,
    relu: Relu,
    cache: Option<SpadeCache>,
}

#[derive(Clone, Debug)]
struct SpadeCache {
    stats: InstanceStats,
    gamma: Tensor,
}

impl SpadeBlock {
    pub fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut gamma = Conv3d::new(hidden, channels, 1, 1, rng);
        let mut beta = Conv3d::new(hidden, channels, 1, 1, rng);
        // start near plain normalization
        gamma.weight.value.iter_mut().for_each(|v| *v *= 0.1);
        beta.weight.value.iter_mut().for_each(|v| *v *= 0.1);
        SpadeBlock { shared: Conv3d::new(1, hidden, 3, 1, rng), gamma, beta, relu: Relu::default(), cache: None }
    }

    /// Zeroes the modulation so the block reduces to plain normalization.
    pub fn zero_modulation(&mut self) {
        for conv in [&mut self.gamma, &mut self.beta] {
            conv.weight.value.fill(0.0);
            conv.bias.value.fill(0.0);
        }
    }

    pub fn forward(&mut self, x: &Tensor, mask: &Tensor, mode: Mode) -> Result<Tensor> {
        if mask.spatial() != x.spatial() || mask.batch() != x.batch() || mask.channels() != 1 {
            return Err(Error::Config(format!(
                "SPADE mask shape {:?} does not match features {:?}",
                mask.shape(),
                x.shape()
            )));
        }
        let train = mode == Mode::Train;
        let hidden = self.shared.forward(mask, train);
        let hidden = self.relu.forward(hidden, train);
        let gamma = self.gamma.forward(&hidden, train);
        let beta = self.beta.forward(&hidden, train);
        let stats = instance_norm(x);
        let mut y = beta;
        for ((o, &xh), &g) in y.data_mut().iter_mut().zip(stats.xhat.data()).zip(gamma.data()) {
            *o += xh * (1.0 + g);
        }
        self.cache = train.then_some(SpadeCache { stats, gamma });
        Ok(y)
    }

    /// Returns `(d features, d mask)`.
    pub fn backward(&mut self, dy: &Tensor) -> (Tensor, Tensor) {
        let SpadeCache { stats, gamma } = self.cache.take().expect("SPADE backward without cached forward");
        let mut dgamma = dy.clone();
        for (o, &xh) in dgamma.data_mut().iter_mut().zip(stats.xhat.data()) {
            *o *= xh;
        }
        let mut dxhat = dy.clone();
        for (o, &g) in dxhat.data_mut().iter_mut().zip(gamma.data()) {
            *o *= 1.0 + g;
        }
        let dx = instance_norm_backward(&stats, &dxhat);
        let mut dhidden = self.gamma.backward(&dgamma, true).expect("input grad requested");
        dhidden.add_assign(&self.beta.backward(dy, true).expect("input grad requested"));
        let dhidden = self.relu.backward(dhidden);
        let dmask = self.shared.backward(&dhidden, true).expect("input grad requested");
        (dx, dmask)
    }
}

impl Module for SpadeBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.shared.visit(&join(prefix, "shared"), f);
        self.gamma.visit(&join(prefix, "gamma"), f);
        self.beta.visit(&join(prefix, "beta"), f);
    }
}

fn upsampler_in(enc: &EncoderConfig, level: usize) -> usize {
    if level + 1 == enc.n_levels {
        enc.latent_channels
    } else {
        enc.level_channels(level + 1)
    }
}

/// `z_d` plus all skips → lesion logits. Levels are stored deepest first.
/// Initial lesion probability of the segmentation head, so early training
/// is not swamped by background cross-entropy.
pub const LESION_PRIOR: f32 = 0.01;

#[derive(Clone, Debug)]
pub struct SegDecoder {
    pub ups: Vec<ConvTranspose3d>,
    pub blocks: Vec<ConvBnRelu>,
    pub head: Conv3d,
    n_levels: usize,
}

impl SegDecoder {
    pub fn new(enc: &EncoderConfig, seed: u64) -> Result<Self> {
        enc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for level in (0..enc.n_levels).rev() {
            let c = enc.level_channels(level);
            ups.push(ConvTranspose3d::new(upsampler_in(enc, level), c, &mut rng));
            blocks.push(ConvBnRelu::new(2 * c, c, 1, &mut rng));
        }
        let mut head = Conv3d::new(enc.level_channels(0), 1, 1, 1, &mut rng);
        head.bias.value[0] = (LESION_PRIOR / (1.0 - LESION_PRIOR)).ln();
        Ok(SegDecoder { ups, blocks, head, n_levels: enc.n_levels })
    }

    /// Returns logits; probabilities are `sigmoid(logits)`.
    pub fn forward(&mut self, z_d: &Tensor, skips: &SkipStack, mode: Mode) -> Result<Tensor> {
        if skips.len() != self.n_levels {
            return Err(Error::Config(format!("expected {} skip levels, got {}", self.n_levels, skips.len())));
        }
        let train = mode == Mode::Train;
        let mut h = z_d.clone();
        for (k, level) in (0..self.n_levels).rev().enumerate() {
            let up = self.ups[k].forward(&h, train);
            let skip = skips.disease(level);
            if skip.spatial() != up.spatial() || skip.batch() != up.batch() {
                return Err(Error::Config(format!(
                    "skip level {level} shape {:?} does not match upsampled {:?}",
                    skip.shape(),
                    up.shape()
                )));
            }
            h = self.blocks[k].forward(&Tensor::concat_channels(&up, skip), mode);
        }
        Ok(self.head.forward(&h, train))
    }

    /// Takes the gradient w.r.t. logits; returns `(d z_d, d skips)` with the
    /// skip gradients indexed by level.
    pub fn backward(&mut self, dlogits: &Tensor) -> (Tensor, Vec<Option<Tensor>>) {
        let mut skip_grads = vec![None; self.n_levels];
        let mut g = self.head.backward(dlogits, true).expect("input grad requested");
        for k in (0..self.n_levels).rev() {
            let level = self.n_levels - 1 - k;
            let dcat = self.blocks[k].backward(g, true).expect("input grad requested");
            let cup = self.ups[k].out_channels();
            let (dup, dskip) = dcat.split_channels(cup);
            skip_grads[level] = Some(dskip);
            g = self.ups[k].backward(&dup);
        }
        (g, skip_grads)
    }
}

impl Module for SegDecoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (k, (up, blk)) in self.ups.iter_mut().zip(self.blocks.iter_mut()).enumerate() {
            up.visit(&join(prefix, &format!("up{k}")), f);
            blk.visit(&join(prefix, &format!("block{k}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug)]
enum ImageNorm {
    Spade(SpadeBlock),
    Batch(BatchNorm3d),
}

/// Image decoder: `z_h`, the retained skips and (optionally) the lesion mask
/// → intensity image. With SPADE disabled it is a plain decoder used by the
/// reconstruction baselines.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub cfg: SpadeDecoderConfig,
    pub ups: Vec<ConvTranspose3d>,
    pub convs: Vec<Conv3d>,
    norms: Vec<ImageNorm>,
    relus: Vec<Relu>,
    pub head: Conv3d,
    n_levels: usize,
    input_side: Option<usize>,
}

impl ImageDecoder {
    pub fn new(enc: &EncoderConfig, cfg: &SpadeDecoderConfig, spade: bool, seed: u64) -> Result<Self> {
        enc.validate()?;
        cfg.validate(enc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ups, mut convs, mut norms, mut relus) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for level in (0..enc.n_levels).rev() {
            let c = enc.level_channels(level);
            ups.push(ConvTranspose3d::new(upsampler_in(enc, level), c, &mut rng));
            let cin = if cfg.uses_skip(level) { 2 * c } else { c };
            convs.push(Conv3d::new(cin, c, 3, 1, &mut rng));
            norms.push(if spade {
                ImageNorm::Spade(SpadeBlock::new(c, cfg.spade_hidden_channels, &mut rng))
            } else {
                ImageNorm::Batch(BatchNorm3d::new(c))
            });
            relus.push(Relu::default());
        }
        let head = Conv3d::new(enc.level_channels(0), 1, 1, 1, &mut rng);
        Ok(ImageDecoder { cfg: cfg.clone(), ups, convs, norms, relus, head, n_levels: enc.n_levels, input_side: None })
    }

    pub fn is_spade(&self) -> bool {
        matches!(self.norms.first(), Some(ImageNorm::Spade(_)))
    }

    /// SPADE block of decoding step `k` (deepest first), if any.
    pub fn spade_mut(&mut self, k: usize) -> Option<&mut SpadeBlock> {
        match self.norms.get_mut(k) {
            Some(ImageNorm::Spade(s)) => Some(s),
            _ => None,
        }
    }

    /// `mask` is `(n, 1, D, H, W)` at input resolution; ignored without SPADE.
    pub fn forward(&mut self, z_h: &Tensor, skips: &SkipStack, mask: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        if skips.len() != self.n_levels {
            return Err(Error::Config(format!("expected {} skip levels, got {}", self.n_levels, skips.len())));
        }
        let train = mode == Mode::Train;
        let full = skips.healthy(0).spatial()[0];
        if self.is_spade() {
            let m = mask.ok_or_else(|| Error::Config("SPADE decoder needs a mask".into()))?;
            if m.spatial() != [full; 3] || m.batch() != z_h.batch() {
                return Err(Error::Config(format!(
                    "mask shape {:?} does not match input side {full} and batch {}",
                    m.shape(),
                    z_h.batch()
                )));
            }
        }
        self.input_side = Some(full);
        let mut h = z_h.clone();
        for (k, level) in (0..self.n_levels).rev().enumerate() {
            let up = self.ups[k].forward(&h, train);
            let input = if self.cfg.uses_skip(level) {
                Tensor::concat_channels(&up, skips.healthy(level))
            } else {
                up
            };
            let conv = self.convs[k].forward(&input, train);
            let normed = match &mut self.norms[k] {
                ImageNorm::Spade(s) => {
                    let side = conv.spatial()[0];
                    let m = downsample_mask_tensor(mask.expect("checked above"), side)?;
                    s.forward(&conv, &m, mode)?
                }
                ImageNorm::Batch(bn) => bn.forward(&conv, train, train),
            };
            h = self.relus[k].forward(normed, train);
        }
        Ok(self.head.forward(&h, train))
    }

    /// Returns `(d z_h, d skips by level, d mask at input resolution)`.
    pub fn backward(&mut self, dimage: &Tensor) -> (Tensor, Vec<Option<Tensor>>, Option<Tensor>) {
        let full = self.input_side.expect("image decoder backward without forward");
        let mut skip_grads = vec![None; self.n_levels];
        let mut dmask: Option<Tensor> = None;
        let mut g = self.head.backward(dimage, true).expect("input grad requested");
        for k in (0..self.n_levels).rev() {
            let level = self.n_levels - 1 - k;
            let d = self.relus[k].backward(g);
            let d = match &mut self.norms[k] {
                ImageNorm::Spade(s) => {
                    let (dx, dm) = s.backward(&d);
                    let dm_full = downsample_mask_backward(&dm, full);
                    match dmask.as_mut() {
                        Some(acc) => acc.add_assign(&dm_full),
                        None => dmask = Some(dm_full),
                    }
                    dx
                }
                ImageNorm::Batch(bn) => bn.backward(&d),
            };
            let dinput = self.convs[k].backward(&d, true).expect("input grad requested");
            let dup = if self.cfg.uses_skip(level) {
                let (dup, dskip) = dinput.split_channels(self.ups[k].out_channels());
                skip_grads[level] = Some(dskip);
                dup
            } else {
                dinput
            };
            g = self.ups[k].backward(&dup);
        }
        (g, skip_grads, dmask)
    }
}

impl Module for ImageDecoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for k in 0..self.ups.len() {
            self.ups[k].visit(&join(prefix, &format!("up{k}")), f);
            self.convs[k].visit(&join(prefix, &format!("conv{k}")), f);
            match &mut self.norms[k] {
                ImageNorm::Spade(s) => s.visit(&join(prefix, &format!("spade{k}")), f),
                ImageNorm::Batch(bn) => bn.visit(&join(prefix, &format!("bn{k}")), f),
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// Which image the decoder produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    FullReconstruction,
    PseudoHealthy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconOutput {
    pub image: Volume,
    pub kind: ReconKind,
}

impl ReconOutput {
    /// Labels an image by the mask that produced it: the empty mask yields
    /// the pseudo-healthy image.
    pub fn new(image: Volume, mask: &Mask) -> Self {
        let kind = if mask.is_empty_mask() { ReconKind::PseudoHealthy } else { ReconKind::FullReconstruction };
        ReconOutput { image, kind }
    }
}

/// Lesion probabilities from logits.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let mut p = logits.clone();
    p.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    p
}
