//! Segmentation, reconstruction and overall objective terms.
//!
//! All reductions accumulate in `f64`. The `*_with_grad` variants return the
//! gradient with respect to the prediction alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_s: f64,
    pub w_r: f64,
    pub w_ph: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_s: 100.0, w_r: 10.0, w_ph: 1e-3, dice_eps: 1e-5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_s, self.w_r, self.w_ph].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config("dice_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub l_seg: f64,
    pub l_dice: f64,
    pub l_ce: f64,
    pub l_recon: f64,
    pub l_pseudo_healthy: f64,
    pub l_overall: f64,
    pub l_critic: f64,
}

impl LossReport {
    pub const HEADER: &'static str = "step\tl_seg\tl_dice\tl_ce\tl_recon\tl_pseudo_healthy\tl_overall\tl_critic";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.l_seg,
            self.l_dice,
            self.l_ce,
            self.l_recon,
            self.l_pseudo_healthy,
            self.l_overall,
            self.l_critic
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("loss log row has {} fields, expected 8", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("loss log value {s:?}: {e}")));
        Ok(LossReport {
            step: f[0].parse().map_err(|e| Error::Format(format!("loss log step {:?}: {e}", f[0])))?,
            l_seg: num(f[1])?,
            l_dice: num(f[2])?,
            l_ce: num(f[3])?,
            l_recon: num(f[4])?,
            l_pseudo_healthy: num(f[5])?,
            l_overall: num(f[6])?,
            l_critic: num(f[7])?,
        })
    }

    /// `l_overall = w_s·l_seg + w_r·l_recon + w_ph·l_pseudo_healthy` within
    /// 1e-9 and every value finite.
    pub fn is_consistent(&self, w: &LossWeights) -> bool {
        let vals = [self.l_seg, self.l_dice, self.l_ce, self.l_recon, self.l_pseudo_healthy, self.l_overall, self.l_critic];
        vals.iter().all(|v| v.is_finite())
            && (self.l_overall - overall_loss(self.l_seg, self.l_recon, self.l_pseudo_healthy, w)).abs() <= 1e-9
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Data(format!("{what}: length mismatch or empty input ({a} vs {b})")));
    }
    Ok(())
}

/// Soft Dice loss `1 - (2Σpg + ε) / (Σp + Σg + ε)` over all voxels.
pub fn dice_loss(pred: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    check_len(pred.len(), gt.len(), "dice loss")?;
    let (inter, total) = dice_sums(pred, gt);
    Ok(1.0 - (2.0 * inter + eps) / (total + eps))
}

fn dice_sums(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    pred.iter().zip(gt).fold((0.0, 0.0), |(i, s), (&p, &g)| (i + p * g, s + p + g))
}

pub fn dice_loss_with_grad(pred: &[f64], gt: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), gt.len(), "dice loss")?;
    let (inter, total) = dice_sums(pred, gt);
    let num = 2.0 * inter + eps;
    let den = total + eps;
    let grad = gt.iter().map(|&g| -(2.0 * g * den - num) / (den * den)).collect();
    Ok((1.0 - num / den, grad))
}

/// Voxel-mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn cross_entropy_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred.len(), gt.len(), "cross-entropy loss")?;
    let n = pred.len() as f64;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / n)
}

pub fn cross_entropy_loss_with_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = cross_entropy_loss(pred, gt)?;
    let n = pred.len() as f64;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            if !(CE_CLAMP..=1.0 - CE_CLAMP).contains(&p) {
                0.0
            } else {
                (-g / p + (1.0 - g) / (1.0 - p)) / n
            }
        })
        .collect();
    Ok((value, grad))
}

/// `(combo, dice, ce)` where combo = dice + ce.
pub fn combo_loss(pred: &[f64], gt: &[f64], eps: f64) -> Result<(f64, f64, f64)> {
    let d = dice_loss(pred, gt, eps)?;
    let c = cross_entropy_loss(pred, gt)?;
    Ok((d + c, d, c))
}

pub fn combo_loss_with_grad(pred: &[f64], gt: &[f64], eps: f64) -> Result<((f64, f64, f64), Vec<f64>)> {
    let (d, mut gd) = dice_loss_with_grad(pred, gt, eps)?;
    let (c, gc) = cross_entropy_loss_with_grad(pred, gt)?;
    gd.iter_mut().zip(gc).for_each(|(a, b)| *a += b);
    Ok(((d + c, d, c), gd))
}

/// Mean absolute error plus mean squared error.
pub fn recon_loss(x: &[f64], r: &[f64]) -> Result<f64> {
    check_len(x.len(), r.len(), "reconstruction loss")?;
    let n = x.len() as f64;
    let (mae, mse) = x.iter().zip(r).fold((0.0, 0.0), |(a, s), (&xv, &rv)| {
        let e = rv - xv;
        (a + e.abs(), s + e * e)
    });
    Ok(mae / n + mse / n)
}

/// Gradient with respect to `r`; the subgradient of `|e|` at 0 is 0.
pub fn recon_loss_with_grad(x: &[f64], r: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = recon_loss(x, r)?;
    let n = x.len() as f64;
    let grad = x
        .iter()
        .zip(r)
        .map(|(&xv, &rv)| {
            let e = rv - xv;
            let sign = if e > 0.0 {
                1.0
            } else if e < 0.0 {
                -1.0
            } else {
                0.0
            };
            (sign + 2.0 * e) / n
        })
        .collect();
    Ok((value, grad))
}

pub fn overall_loss(l_seg: f64, l_recon: f64, l_ph: f64, w: &LossWeights) -> f64 {
    w.w_s * l_seg + w.w_r * l_recon + w.w_ph * l_ph
}
