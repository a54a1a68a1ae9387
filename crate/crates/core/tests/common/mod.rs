#![allow(dead_code)]

use dseg::critic::MlpCritic;
use dseg::model::Method;
use dseg::phantom::{generate_case, CaseRecord, Label, PhantomSpec, Split};
use dseg::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn binary(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()
}

/// Central differences of `f` at `x` in every coordinate.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let keep = x[i];
            x[i] = keep + h;
            let up = f(&x);
            x[i] = keep - h;
            let down = f(&x);
            x[i] = keep;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

pub fn random_mlp(dim: usize, h1: usize, h2: usize, seed: u64) -> MlpCritic {
    let mut r = rng(seed);
    let mut g = |n: usize, s: f64| uniform(n, -s, s, &mut r);
    MlpCritic {
        dims: [dim, h1, h2],
        w1: g(h1 * dim, 0.8),
        b1: g(h1, 0.3),
        w2: g(h2 * h1, 0.6),
        b2: g(h2, 0.3),
        w3: g(h2, 0.9),
        b3: 0.1,
        slope: 0.2,
    }
}

/// Small networks on 16³ volumes.
pub fn tiny_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig { method, ..TrainConfig::default() };
    cfg.encoder.base_channels = 2;
    cfg.encoder.n_levels = 3;
    cfg.encoder.latent_channels = 4;
    cfg.critic.hidden = (8, 8);
    cfg
}

pub fn spec16() -> PhantomSpec {
    PhantomSpec::desk().scaled_to(16)
}

/// Cases of both labels at 16³, labelled with the given split.
pub fn cases16(n_healthy: usize, n_disease: usize, split: Split, seed0: u64) -> Vec<CaseRecord> {
    let spec = spec16();
    let mut out = Vec::new();
    for i in 0..n_healthy {
        out.push(generate_case(&spec, Label::Healthy, seed0 + i as u64).unwrap());
    }
    for i in 0..n_disease {
        out.push(generate_case(&spec, Label::Disease, seed0 + 1000 + i as u64).unwrap());
    }
    for c in &mut out {
        c.split = split;
    }
    out
}
