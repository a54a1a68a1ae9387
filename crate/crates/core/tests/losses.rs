mod common;

use common::*;
use dseg::losses::*;
use proptest::prelude::*;

/// Straight-line transcriptions of each formula, kept apart from the
/// library code on purpose.
mod oracle {
    pub fn dice(p: &[f64], g: &[f64], eps: f64) -> f64 {
        let mut inter = 0.0;
        let mut sp = 0.0;
        let mut sg = 0.0;
        for i in 0..p.len() {
            inter += p[i] * g[i];
            sp += p[i];
            sg += g[i];
        }
        1.0 - (2.0 * inter + eps) / (sp + sg + eps)
    }

    pub fn ce(p: &[f64], g: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..p.len() {
            let q = p[i].max(1e-7).min(1.0 - 1e-7);
            total -= g[i] * q.ln() + (1.0 - g[i]) * (1.0 - q).ln();
        }
        total / p.len() as f64
    }

    pub fn recon(x: &[f64], r: &[f64]) -> f64 {
        let mut abs = 0.0;
        let mut sq = 0.0;
        for i in 0..x.len() {
            let d = x[i] - r[i];
            abs += d.abs();
            sq += d * d;
        }
        abs / x.len() as f64 + sq / x.len() as f64
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-12)
}

#[test]
fn hand_computed_examples() {
    let eps = 1e-5;
    assert!(close(dice_loss(&[1.0, 1.0], &[1.0, 0.0], eps).unwrap(), 1.0 - (2.0 + eps) / (3.0 + eps), 1e-12));
    assert!((dice_loss(&[1.0, 1.0], &[1.0, 0.0], 0.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(dice_loss(&[0.0; 4], &[0.0; 4], eps).unwrap(), 0.0);
    assert!(dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], eps).unwrap() < 1e-4);
    assert!((cross_entropy_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(cross_entropy_loss(&[1.0 - 1e-7, 1e-7], &[1.0, 0.0]).unwrap() < 1e-6);
    let (c, d, e) = combo_loss(&[0.5, 0.5], &[1.0, 0.0], 0.0).unwrap();
    assert!((d - 0.5).abs() < 1e-15 && (c - (0.5 + std::f64::consts::LN_2)).abs() < 1e-12 && c == d + e);
    assert_eq!(recon_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
    assert_eq!(recon_loss(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
    let w = LossWeights::default();
    assert!((overall_loss(1.0, 1.0, 1.0, &w) - 110.001).abs() < 1e-12);
    assert_eq!(overall_loss(0.0, 0.0, 0.0, &w), 0.0);
    let pass = LossWeights { w_s: 1.0, w_r: 0.0, w_ph: 0.0, ..w };
    assert_eq!(overall_loss(0.37, 5.0, -2.0, &pass), 0.37);
    assert!(dice_loss(&[1.0], &[1.0, 0.0], eps).is_err());
    assert!(recon_loss(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn match_brute_force_on_small_inputs() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let n = 1 + seed as usize % 8;
        let p = uniform(n, 0.0, 1.0, &mut r);
        let g = binary(n, &mut r);
        let x = uniform(n, 0.0, 1.0, &mut r);
        let eps = 1e-5;
        assert!(close(dice_loss(&p, &g, eps).unwrap(), oracle::dice(&p, &g, eps), 1e-6));
        assert!(close(cross_entropy_loss(&p, &g).unwrap(), oracle::ce(&p, &g), 1e-6));
        let (c, _, _) = combo_loss(&p, &g, eps).unwrap();
        assert!(close(c, oracle::dice(&p, &g, eps) + oracle::ce(&p, &g), 1e-6));
        assert!(close(recon_loss(&x, &p).unwrap(), oracle::recon(&x, &p), 1e-6));
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let h = 1e-6;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let n = 64;
        // keep away from the clamp and from |x − r| = 0 kinks
        let p = uniform(n, 0.05, 0.95, &mut r);
        let g = binary(n, &mut r);
        let x = uniform(n, 0.0, 1.0, &mut r);
        let eps = 1e-5;

        let (_, a) = dice_loss_with_grad(&p, &g, eps).unwrap();
        let f = numeric_grad(|q| dice_loss(q, &g, eps).unwrap(), &p, h);
        assert!(rel_err(&a, &f) < 1e-4, "dice seed {seed}: {}", rel_err(&a, &f));

        let (_, a) = cross_entropy_loss_with_grad(&p, &g).unwrap();
        let f = numeric_grad(|q| cross_entropy_loss(q, &g).unwrap(), &p, h);
        assert!(rel_err(&a, &f) < 1e-4, "ce seed {seed}");

        let (_, a) = combo_loss_with_grad(&p, &g, eps).unwrap();
        let f = numeric_grad(|q| combo_loss(q, &g, eps).unwrap().0, &p, h);
        assert!(rel_err(&a, &f) < 1e-4, "combo seed {seed}");

        let (_, a) = recon_loss_with_grad(&x, &p).unwrap();
        let f = numeric_grad(|q| recon_loss(&x, q).unwrap(), &p, h);
        assert!(rel_err(&a, &f) < 1e-4, "recon seed {seed}");
    }
}

#[test]
fn report_rows_round_trip() {
    let w = LossWeights::default();
    let mut rep = LossReport { step: 3, l_seg: 0.25, l_dice: 0.2, l_ce: 0.05, l_recon: 0.125, ..Default::default() };
    rep.l_pseudo_healthy = -0.75;
    rep.l_overall = overall_loss(rep.l_seg, rep.l_recon, rep.l_pseudo_healthy, &w);
    rep.l_critic = 1.0 / 3.0;
    assert!(rep.is_consistent(&w));
    let back = LossReport::from_tsv(&rep.to_tsv()).unwrap();
    assert_eq!(back, rep);
    assert_eq!(LossReport::HEADER.split('\t').count(), rep.to_tsv().split('\t').count());
}

fn probs_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n))
    })
}

proptest! {
    #[test]
    fn dice_loss_lies_in_unit_interval((p, g) in probs_and_mask()) {
        let d = dice_loss(&p, &g, 1e-5).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_flip_symmetric((p, g) in probs_and_mask()) {
        let c = cross_entropy_loss(&p, &g).unwrap();
        prop_assert!(c >= 0.0);
        let pf: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let gf: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
        let flipped = cross_entropy_loss(&pf, &gf).unwrap();
        prop_assert!((c - flipped).abs() <= 1e-9 * c.max(1.0));
    }

    #[test]
    fn combo_is_the_sum_of_its_parts((p, g) in probs_and_mask()) {
        let (c, d, e) = combo_loss(&p, &g, 1e-5).unwrap();
        prop_assert_eq!(c, d + e);
        prop_assert_eq!(d, dice_loss(&p, &g, 1e-5).unwrap());
        prop_assert_eq!(e, cross_entropy_loss(&p, &g).unwrap());
    }

    #[test]
    fn recon_is_zero_only_at_equality(x in prop::collection::vec(0.0f64..1.0, 1..30), t in 0.1f64..4.0) {
        prop_assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        let r: Vec<f64> = x.iter().map(|v| v + 0.25).collect();
        prop_assert!(recon_loss(&x, &r).unwrap() > 0.0);
        // residual scaled by t: MAE scales by t, MSE by t²
        let rt: Vec<f64> = x.iter().map(|v| v + 0.25 * t).collect();
        let expected = 0.25 * t + 0.0625 * t * t;
        prop_assert!((recon_loss(&x, &rt).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn overall_is_linear_in_each_term(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0, k in -3.0f64..3.0) {
        let w = LossWeights::default();
        let base = overall_loss(a, b, c, &w);
        prop_assert!((overall_loss(a + k, b, c, &w) - base - w.w_s * k).abs() < 1e-9);
        prop_assert!((overall_loss(a, b + k, c, &w) - base - w.w_r * k).abs() < 1e-9);
        prop_assert!((overall_loss(a, b, c + k, &w) - base - w.w_ph * k).abs() < 1e-9);
    }
}
