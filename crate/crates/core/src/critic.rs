//! Wasserstein critic with gradient penalty on the healthy latents.
//!
//! The critic maps a flattened latent to a scalar through three fully
//! connected layers with leaky rectification and no normalization. Its loss
//! needs the gradient of the input-gradient norm with respect to the
//! parameters; since leaky ReLU is piecewise linear that second-order term
//! has a closed form, implemented in [`MlpCritic::penalty_param_grad`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, leaky_relu, leaky_relu_grad, Module, Param};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub hidden: (usize, usize),
    pub lambda_gp: f64,
    pub w_c: f64,
    pub leaky_slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { hidden: (64, 64), lambda_gp: 10.0, w_c: 1e-2, leaky_slope: 0.2 }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0) {
            return Err(Error::Config("lambda_gp must be >= 0".into()));
        }
        if !(self.w_c > 0.0) {
            return Err(Error::Config("w_c must be > 0".into()));
        }
        if self.hidden.0 == 0 || self.hidden.1 == 0 {
            return Err(Error::Config("critic hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// A scalar critic with the derivatives the WGAN-GP objective needs.
pub trait CriticNet {
    /// Parameter-shaped gradient accumulator.
    type Grad;

    fn input_dim(&self) -> usize;
    fn score(&self, z: &[f64]) -> f64;
    /// `∇_z C(z)`.
    fn input_grad(&self, z: &[f64]) -> Vec<f64>;
    fn zero_grad(&self) -> Self::Grad;
    /// `acc += scale · ∂C(z)/∂θ`; returns `C(z)`.
    fn score_param_grad(&self, z: &[f64], scale: f64, acc: &mut Self::Grad) -> f64;
    /// `acc += scale · ∂(‖∇_z C(z)‖₂ − 1)²/∂θ`; returns the penalty.
    fn penalty_param_grad(&self, z: &[f64], scale: f64, acc: &mut Self::Grad) -> f64;
}

/// `C(z) = ⟨w, z⟩ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    pub w: Vec<f64>,
    pub b: f64,
}

impl CriticNet for LinearCritic {
    type Grad = LinearCritic;

    fn input_dim(&self) -> usize {
        self.w.len()
    }

    fn score(&self, z: &[f64]) -> f64 {
        self.w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    fn input_grad(&self, _z: &[f64]) -> Vec<f64> {
        self.w.clone()
    }

    fn zero_grad(&self) -> LinearCritic {
        LinearCritic { w: vec![0.0; self.w.len()], b: 0.0 }
    }

    fn score_param_grad(&self, z: &[f64], scale: f64, acc: &mut LinearCritic) -> f64 {
        acc.w.iter_mut().zip(z).for_each(|(a, v)| *a += scale * v);
        acc.b += scale;
        self.score(z)
    }

    fn penalty_param_grad(&self, _z: &[f64], scale: f64, acc: &mut LinearCritic) -> f64 {
        let norm = l2(&self.w);
        if norm > 1e-12 {
            let k = scale * 2.0 * (norm - 1.0) / norm;
            acc.w.iter_mut().zip(&self.w).for_each(|(a, w)| *a += k * w);
        }
        (norm - 1.0).powi(2)
    }
}

/// Dense `f64` view of a three-layer critic. Weight matrices are row-major
/// `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCritic {
    pub dims: [usize; 3],
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
    pub slope: f64,
}

struct Activations {
    s1: Vec<f64>,
    h1: Vec<f64>,
    s2: Vec<f64>,
    h2: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `Wᵀ y` for row-major `W (rows × cols)`.
fn matvec_t(w: &[f64], y: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &yv) in y.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += wv * yv;
        }
    }
    out
}

/// `acc += scale · u vᵀ`.
fn outer_add(acc: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    let cols = v.len();
    for (r, &uv) in u.iter().enumerate() {
        let k = scale * uv;
        for (a, &vv) in acc[r * cols..(r + 1) * cols].iter_mut().zip(v) {
            *a += k * vv;
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl MlpCritic {
    fn forward(&self, z: &[f64]) -> Activations {
        let [_, h1n, h2n] = self.dims;
        let mut a1 = matvec(&self.w1, z, h1n);
        a1.iter_mut().zip(&self.b1).for_each(|(a, b)| *a += b);
        let s1: Vec<f64> = a1.iter().map(|&a| leaky_relu_grad(a, self.slope)).collect();
        let h1: Vec<f64> = a1.iter().map(|&a| leaky_relu(a, self.slope)).collect();
        let mut a2 = matvec(&self.w2, &h1, h2n);
        a2.iter_mut().zip(&self.b2).for_each(|(a, b)| *a += b);
        let s2: Vec<f64> = a2.iter().map(|&a| leaky_relu_grad(a, self.slope)).collect();
        let h2: Vec<f64> = a2.iter().map(|&a| leaky_relu(a, self.slope)).collect();
        Activations { s1, h1, s2, h2 }
    }

    /// Backward signals `δ2 = s2 ⊙ w3`, `δ1 = s1 ⊙ W2ᵀ δ2`.
    fn deltas(&self, act: &Activations) -> (Vec<f64>, Vec<f64>) {
        let d2: Vec<f64> = act.s2.iter().zip(&self.w3).map(|(s, w)| s * w).collect();
        let mut d1 = matvec_t(&self.w2, &d2, self.dims[1]);
        d1.iter_mut().zip(&act.s1).for_each(|(d, s)| *d *= s);
        (d2, d1)
    }

    /// Adds `scale · other` parameter-wise.
    pub fn axpy(&mut self, scale: f64, other: &MlpCritic) {
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        add(&mut self.w1, &other.w1);
        add(&mut self.b1, &other.b1);
        add(&mut self.w2, &other.w2);
        add(&mut self.b2, &other.b2);
        add(&mut self.w3, &other.w3);
        self.b3 += scale * other.b3;
    }

    /// Flat parameter vector in the order w1, b1, w2, b2, w3, b3.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3] {
            v.extend_from_slice(part);
        }
        v.push(self.b3);
        v
    }

    pub fn unflatten(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3] {
            part.iter_mut().for_each(|x| *x = it.next().expect("flat vector too short"));
        }
        self.b3 = it.next().expect("flat vector too short");
    }
}

impl CriticNet for MlpCritic {
    type Grad = MlpCritic;

    fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn score(&self, z: &[f64]) -> f64 {
        let act = self.forward(z);
        act.h2.iter().zip(&self.w3).map(|(h, w)| h * w).sum::<f64>() + self.b3
    }

    fn input_grad(&self, z: &[f64]) -> Vec<f64> {
        let act = self.forward(z);
        let (_, d1) = self.deltas(&act);
        matvec_t(&self.w1, &d1, self.dims[0])
    }

    fn zero_grad(&self) -> MlpCritic {
        let mut g = self.clone();
        g.unflatten(&vec![0.0; self.flatten().len()]);
        g
    }

    fn score_param_grad(&self, z: &[f64], scale: f64, acc: &mut MlpCritic) -> f64 {
        let act = self.forward(z);
        let (d2, d1) = self.deltas(&act);
        acc.w3.iter_mut().zip(&act.h2).for_each(|(a, h)| *a += scale * h);
        acc.b3 += scale;
        outer_add(&mut acc.w2, &d2, &act.h1, scale);
        acc.b2.iter_mut().zip(&d2).for_each(|(a, d)| *a += scale * d);
        outer_add(&mut acc.w1, &d1, z, scale);
        acc.b1.iter_mut().zip(&d1).for_each(|(a, d)| *a += scale * d);
        act.h2.iter().zip(&self.w3).map(|(h, w)| h * w).sum::<f64>() + self.b3
    }

    fn penalty_param_grad(&self, z: &[f64], scale: f64, acc: &mut MlpCritic) -> f64 {
        // g = W1ᵀ δ1 with δ1 = s1 ⊙ W2ᵀ (s2 ⊙ w3); the slopes s1, s2 are
        // locally constant, so P = (‖g‖ - 1)² is polynomial in the weights.
        let [din, h1n, _] = self.dims;
        let act = self.forward(z);
        let (d2, d1) = self.deltas(&act);
        let g = matvec_t(&self.w1, &d1, din);
        let norm = l2(&g);
        let penalty = (norm - 1.0).powi(2);
        if norm < 1e-12 {
            return penalty;
        }
        let k = 2.0 * (norm - 1.0) / norm;
        let q: Vec<f64> = g.iter().map(|v| k * v).collect();
        outer_add(&mut acc.w1, &d1, &q, scale);
        let mut r1 = matvec(&self.w1, &q, h1n);
        r1.iter_mut().zip(&act.s1).for_each(|(r, s)| *r *= s);
        outer_add(&mut acc.w2, &d2, &r1, scale);
        let r2 = matvec(&self.w2, &r1, self.dims[2]);
        acc.w3.iter_mut().zip(r2.iter().zip(&act.s2)).for_each(|(a, (r, s))| *a += scale * r * s);
        penalty
    }
}

/// `z_m = α z⁻ + (1 − α) z⁺`.
pub fn interpolate_latent(z_neg: &[f64], z_pos: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z_neg.len() != z_pos.len() {
        return Err(Error::Config(format!("latent sizes differ: {} vs {}", z_neg.len(), z_pos.len())));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(z_neg.iter().zip(z_pos).map(|(n, p)| alpha * n + (1.0 - alpha) * p).collect())
}

/// Healthy-case latents `z_h⁻`, disease-case latents `z_h⁺` and one `α` per
/// index-paired interpolate.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticBatch {
    pub z_h_neg: Vec<Vec<f64>>,
    pub z_h_pos: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
}

impl CriticBatch {
    pub fn pairs(&self) -> usize {
        self.z_h_neg.len().min(self.z_h_pos.len())
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.z_h_neg.is_empty() || self.z_h_pos.is_empty() {
            return Err(Error::Config("critic batch needs healthy and disease latents".into()));
        }
        if self.alphas.len() != self.pairs() {
            return Err(Error::Config(format!("expected {} alphas, got {}", self.pairs(), self.alphas.len())));
        }
        if self.z_h_neg.iter().chain(&self.z_h_pos).any(|z| z.len() != dim) {
            return Err(Error::Config(format!("critic expects latents of size {dim}")));
        }
        Ok(())
    }
}

/// Value and components of the critic objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticLoss {
    pub value: f64,
    /// `mean C(z⁻) − mean C(z⁺)`.
    pub wasserstein: f64,
    /// Mean over pairs of `(‖∇C(z_m)‖₂ − 1)²`.
    pub penalty: f64,
}

fn mean_score<C: CriticNet>(net: &C, zs: &[Vec<f64>]) -> f64 {
    zs.iter().map(|z| net.score(z)).sum::<f64>() / zs.len() as f64
}

/// `w_c · (−(mean C(z⁻) − mean C(z⁺)) + λ_GP · mean (‖∇C(z_m)‖₂ − 1)²)`.
pub fn critic_loss<C: CriticNet>(batch: &CriticBatch, net: &C, cfg: &CriticConfig) -> Result<CriticLoss> {
    let (loss, _) = critic_loss_with_grad(batch, net, cfg)?;
    Ok(loss)
}

pub fn critic_loss_with_grad<C: CriticNet>(
    batch: &CriticBatch,
    net: &C,
    cfg: &CriticConfig,
) -> Result<(CriticLoss, C::Grad)> {
    batch.validate(net.input_dim())?;
    let mut grad = net.zero_grad();
    let (nn, np, pairs) = (batch.z_h_neg.len() as f64, batch.z_h_pos.len() as f64, batch.pairs());
    let mut neg = 0.0;
    for z in &batch.z_h_neg {
        neg += net.score_param_grad(z, -cfg.w_c / nn, &mut grad);
    }
    let mut pos = 0.0;
    for z in &batch.z_h_pos {
        pos += net.score_param_grad(z, cfg.w_c / np, &mut grad);
    }
    let wasserstein = neg / nn - pos / np;
    let mut penalty = 0.0;
    for i in 0..pairs {
        let zm = interpolate_latent(&batch.z_h_neg[i], &batch.z_h_pos[i], batch.alphas[i])?;
        penalty += net.penalty_param_grad(&zm, cfg.w_c * cfg.lambda_gp / pairs as f64, &mut grad);
    }
    penalty /= pairs as f64;
    let value = cfg.w_c * (-wasserstein + cfg.lambda_gp * penalty);
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite critic loss".into()));
    }
    Ok((CriticLoss { value, wasserstein, penalty }, grad))
}

/// `−mean C(z⁺)` and its gradient with respect to each disease latent. The
/// critic parameters get no gradient from this term.
pub fn pseudo_healthy_loss<C: CriticNet>(z_h_pos: &[Vec<f64>], net: &C) -> Result<(f64, Vec<Vec<f64>>)> {
    if z_h_pos.is_empty() {
        return Err(Error::Config("pseudo-healthy loss needs at least one latent".into()));
    }
    if z_h_pos.iter().any(|z| z.len() != net.input_dim()) {
        return Err(Error::Config(format!("critic expects latents of size {}", net.input_dim())));
    }
    let n = z_h_pos.len() as f64;
    let value = -mean_score(net, z_h_pos);
    let grads = z_h_pos.iter().map(|z| net.input_grad(z).into_iter().map(|g| -g / n).collect()).collect();
    Ok((value, grads))
}

/// Flattens sample `n` of a latent tensor.
pub fn flatten_latent(z: &Tensor, n: usize) -> Vec<f64> {
    z.sample(n).iter().map(|&v| v as f64).collect()
}

/// The trainable critic; parameters live as `f32` like the rest of the model.
#[derive(Clone, Debug)]
pub struct Critic {
    pub cfg: CriticConfig,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub w3: Param,
    pub b3: Param,
    input_dim: usize,
}

impl Critic {
    pub fn new(input_dim: usize, cfg: &CriticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("critic input must be nonempty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h1, h2) = cfg.hidden;
        Ok(Critic {
            cfg: cfg.clone(),
            w1: Param::he_normal(&[h1, input_dim], input_dim, &mut rng),
            b1: Param::zeros(&[h1]),
            w2: Param::he_normal(&[h2, h1], h1, &mut rng),
            b2: Param::zeros(&[h2]),
            w3: Param::he_normal(&[h2], h2, &mut rng),
            b3: Param::zeros(&[1]),
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn net(&self) -> MlpCritic {
        let f = |p: &Param| p.value.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        MlpCritic {
            dims: [self.input_dim, self.cfg.hidden.0, self.cfg.hidden.1],
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            w3: f(&self.w3),
            b3: self.b3.value[0] as f64,
            slope: self.cfg.leaky_slope,
        }
    }

    /// Adds an `f64` gradient into the parameter gradients.
    pub fn accumulate(&mut self, g: &MlpCritic) {
        let add = |p: &mut Param, v: &[f64]| p.grad.iter_mut().zip(v).for_each(|(a, b)| *a += *b as f32);
        add(&mut self.w1, &g.w1);
        add(&mut self.b1, &g.b1);
        add(&mut self.w2, &g.w2);
        add(&mut self.b2, &g.b2);
        add(&mut self.w3, &g.w3);
        self.b3.grad[0] += g.b3 as f32;
    }

    pub fn score(&self, z: &Tensor, n: usize) -> Result<f64> {
        if z.sample_len() != self.input_dim {
            return Err(Error::Config(format!(
                "critic expects latents of size {}, got {}",
                self.input_dim,
                z.sample_len()
            )));
        }
        Ok(self.net().score(&flatten_latent(z, n)))
    }
}

impl Module for Critic {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
        f(&join(prefix, "w3"), &mut self.w3);
        f(&join(prefix, "b3"), &mut self.b3);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: Vec<f64>) -> LinearCritic {
        LinearCritic { w, b: 0.0 }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let (n, p) = (vec![2.0, 0.0], vec![0.0, 2.0]);
        assert_eq!(interpolate_latent(&n, &p, 1.0).unwrap(), n);
        assert_eq!(interpolate_latent(&n, &p, 0.0).unwrap(), p);
        assert_eq!(interpolate_latent(&n, &p, 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(interpolate_latent(&n, &[1.0], 0.5).is_err());
    }

    #[test]
    fn linear_critic_scores() {
        let zero = linear(vec![0.0; 3]);
        assert_eq!(zero.score(&[1.0, -4.0, 2.0]), 0.0);
        let c = linear(vec![1.0, 2.0]);
        assert_ne!(c.score(&[1.0, 1.0]), c.score(&[2.0, 2.0]));
    }

    #[test]
    fn unit_norm_linear_critic_has_no_penalty() {
        let c = linear(vec![0.6, 0.8]);
        let batch = CriticBatch { z_h_neg: vec![vec![1.0, 0.0]], z_h_pos: vec![vec![0.0, 1.0]], alphas: vec![0.3] };
        let loss = critic_loss(&batch, &c, &CriticConfig::default()).unwrap();
        assert!(loss.penalty.abs() < 1e-12);
    }

    #[test]
    fn norm_three_linear_critic_penalty_is_forty() {
        let c = linear(vec![3.0, 0.0]);
        // both sides score equally so the Wasserstein term vanishes
        let batch = CriticBatch { z_h_neg: vec![vec![0.0, 1.0]], z_h_pos: vec![vec![0.0, 5.0]], alphas: vec![0.5] };
        let cfg = CriticConfig { w_c: 1.0, lambda_gp: 10.0, ..CriticConfig::default() };
        let loss = critic_loss(&batch, &c, &cfg).unwrap();
        assert!((loss.value - 40.0).abs() < 1e-9);
    }

    #[test]
    fn pseudo_healthy_examples() {
        let c = LinearCritic { w: vec![0.0], b: 1.5 };
        let (v, _) = pseudo_healthy_loss(&[vec![7.0]], &c).unwrap();
        assert_eq!(v, -1.5);
        let z = linear(vec![0.0, 0.0]);
        assert_eq!(pseudo_healthy_loss(&[vec![1.0, 2.0]], &z).unwrap().0, 0.0);
    }

    #[test]
    fn batch_validation() {
        let c = linear(vec![1.0]);
        let empty = CriticBatch { z_h_neg: vec![], z_h_pos: vec![vec![1.0]], alphas: vec![] };
        assert!(critic_loss(&empty, &c, &CriticConfig::default()).is_err());
        let wrong = CriticBatch { z_h_neg: vec![vec![1.0, 2.0]], z_h_pos: vec![vec![1.0]], alphas: vec![0.5] };
        assert!(critic_loss(&wrong, &c, &CriticConfig::default()).is_err());
    }
}
