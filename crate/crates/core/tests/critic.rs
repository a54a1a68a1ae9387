mod common;

use common::*;
use dseg::critic::*;
use dseg::nn::Module;
use proptest::prelude::*;

fn penalty_of(net: &MlpCritic, z: &[f64]) -> f64 {
    let g = net.input_grad(z);
    (g.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).powi(2)
}

#[test]
fn linear_critic_gradient_norm_is_weight_norm() {
    let c = LinearCritic { w: vec![1.0, -2.0, 2.0], b: 0.5 };
    let g = c.input_grad(&[0.3, 0.1, -4.0]);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 3.0).abs() < 1e-6);
}

#[test]
fn plugged_in_objective_value() {
    // C(z⁻) = 2, C(z⁺) = 1 with a unit-norm linear critic
    let c = LinearCritic { w: vec![1.0, 0.0], b: 0.0 };
    let batch = CriticBatch { z_h_neg: vec![vec![2.0, 0.0]], z_h_pos: vec![vec![1.0, 5.0]], alphas: vec![0.25] };
    let loss = critic_loss(&batch, &c, &CriticConfig::default()).unwrap();
    assert!((loss.value + 0.01).abs() < 1e-12);
}

#[test]
fn mlp_input_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let net = random_mlp(64, 16, 12, seed);
        let z = uniform(64, -1.0, 1.0, &mut rng(50 + seed));
        let a = net.input_grad(&z);
        let f = numeric_grad(|q| net.score(q), &z, 1e-6);
        assert!(rel_err(&a, &f) < 1e-4, "seed {seed}");
    }
}

#[test]
fn penalty_parameter_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let net = random_mlp(12, 6, 5, seed);
        let z = uniform(12, -1.0, 1.0, &mut rng(70 + seed));
        let mut acc = net.zero_grad();
        net.penalty_param_grad(&z, 1.0, &mut acc);
        let theta = net.flatten();
        let f = numeric_grad(
            |t| {
                let mut n = net.clone();
                n.unflatten(t);
                penalty_of(&n, &z)
            },
            &theta,
            1e-6,
        );
        assert!(rel_err(&acc.flatten(), &f) < 1e-4, "seed {seed}: {}", rel_err(&acc.flatten(), &f));
    }
}

#[test]
fn critic_objective_parameter_gradient_matches_finite_differences() {
    let cfg = CriticConfig { w_c: 0.7, ..CriticConfig::default() };
    for seed in 0..10 {
        let net = random_mlp(10, 6, 4, seed);
        let mut r = rng(90 + seed);
        let batch = CriticBatch {
            z_h_neg: (0..2).map(|_| uniform(10, -1.0, 1.0, &mut r)).collect(),
            z_h_pos: (0..2).map(|_| uniform(10, -1.0, 1.0, &mut r)).collect(),
            alphas: uniform(2, 0.0, 1.0, &mut r),
        };
        let (_, grad) = critic_loss_with_grad(&batch, &net, &cfg).unwrap();
        let f = numeric_grad(
            |t| {
                let mut n = net.clone();
                n.unflatten(t);
                critic_loss(&batch, &n, &cfg).unwrap().value
            },
            &net.flatten(),
            1e-6,
        );
        assert!(rel_err(&grad.flatten(), &f) < 1e-4, "seed {seed}");
    }
}

#[test]
fn pseudo_healthy_latent_gradient_matches_finite_differences() {
    let net = random_mlp(8, 5, 5, 3);
    let mut r = rng(4);
    let zs: Vec<Vec<f64>> = (0..2).map(|_| uniform(8, -1.0, 1.0, &mut r)).collect();
    let (_, grads) = pseudo_healthy_loss(&zs, &net).unwrap();
    for k in 0..2 {
        let f = numeric_grad(
            |q| {
                let mut all = zs.clone();
                all[k] = q.to_vec();
                pseudo_healthy_loss(&all, &net).unwrap().0
            },
            &zs[k],
            1e-6,
        );
        assert!(rel_err(&grads[k], &f) < 1e-4);
    }
}

#[test]
fn training_the_critic_alone_separates_fixed_clusters() {
    let dim = 6;
    let mut critic = Critic::new(dim, &CriticConfig { hidden: (16, 16), ..CriticConfig::default() }, 5).unwrap();
    let mut opt = dseg::optim::Adam::new(dseg::optim::AdamConfig::default());
    let mut r = rng(6);
    let neg: Vec<Vec<f64>> = (0..2).map(|_| uniform(dim, 0.5, 1.5, &mut r)).collect();
    let pos: Vec<Vec<f64>> = (0..2).map(|_| uniform(dim, -1.5, -0.5, &mut r)).collect();
    let mut history = Vec::new();
    for _ in 0..100 {
        let batch = CriticBatch { z_h_neg: neg.clone(), z_h_pos: pos.clone(), alphas: uniform(2, 0.0, 1.0, &mut r) };
        let (loss, grad) = critic_loss_with_grad(&batch, &critic.net(), &critic.cfg).unwrap();
        history.push(loss.wasserstein);
        critic.zero_grad();
        critic.accumulate(&grad);
        opt.step(|f| critic.visit("critic", f));
    }
    let early: f64 = history[..10].iter().sum::<f64>() / 10.0;
    let late: f64 = history[90..].iter().sum::<f64>() / 10.0;
    assert!(late > early, "wasserstein estimate did not grow: {early} -> {late}");
}

#[test]
fn pseudo_healthy_loss_leaves_critic_parameters_alone() {
    let critic = Critic::new(4, &CriticConfig::default(), 1).unwrap();
    let before = critic.net();
    let _ = pseudo_healthy_loss(&[vec![0.1, 0.2, 0.3, 0.4]], &critic.net()).unwrap();
    assert_eq!(critic.net(), before);
    assert!(critic.w1.grad.iter().all(|g| *g == 0.0));
}

proptest! {
    #[test]
    fn interpolation_is_convex(alpha in 0.0f64..=1.0, a in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let b: Vec<f64> = a.iter().map(|v| v * -0.5 + 1.0).collect();
        let m = interpolate_latent(&a, &b, alpha).unwrap();
        for i in 0..a.len() {
            let (lo, hi) = if a[i] < b[i] { (a[i], b[i]) } else { (b[i], a[i]) };
            prop_assert!(m[i] >= lo - 1e-12 && m[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn scores_are_reentrant(seed in 0u64..1000) {
        let net = random_mlp(5, 4, 3, seed);
        let z = uniform(5, -1.0, 1.0, &mut rng(seed));
        prop_assert_eq!(net.score(&z), net.score(&z));
    }
}
