//! Grouped Dice evaluation, pseudo-healthy comparison metrics and slice
//! montages.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{Inference, Model};
use crate::phantom::{CaseRecord, Label};
use crate::volume::{Grid3, Mask};

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// `2|P∩G| / (|P| + |G|)` over voxels `≥ 0.5`; two empty masks score 1.
pub fn dice_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Validation(format!("mask shapes differ: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a >= 0.5, b >= 0.5);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Predicted-positive voxels outside the ground truth.
pub fn false_positive_voxels(pred: &Mask, gt: &Mask) -> usize {
    pred.data().iter().zip(gt.data()).filter(|(&a, &b)| a >= 0.5 && b < 0.5).count()
}

/// `1 − mean(P) / mean(R)` inside the ground-truth lesion; `None` for an
/// empty lesion or a non-positive reconstruction there.
pub fn lesion_suppression_ratio(recon: &Grid3, pseudo: &Grid3, gt: &Mask) -> Option<f64> {
    let (mut r, mut p, mut n) = (0.0f64, 0.0f64, 0usize);
    for ((&rv, &pv), &g) in recon.data().iter().zip(pseudo.data()).zip(gt.data()) {
        if g >= 0.5 {
            r += rv as f64;
            p += pv as f64;
            n += 1;
        }
    }
    if n == 0 || r <= 0.0 {
        return None;
    }
    Some(1.0 - p / r)
}

pub fn mean_abs_diff(a: &Grid3, b: &Grid3) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub label: Label,
    pub dice: f64,
    pub fp_voxels: usize,
    pub lesion_suppression_ratio: Option<f64>,
    /// Mean per-voxel `|R − P|`.
    pub recon_pseudo_diff: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl GroupStats {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return GroupStats { n, mean: f64::NAN, std: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        GroupStats { n, mean, std: var.sqrt() }
    }
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub method: String,
    pub threshold: f32,
    pub healthy: GroupStats,
    pub disease: GroupStats,
    pub overall: GroupStats,
    pub mean_fp_voxels_healthy: Option<f64>,
    pub mean_lesion_suppression: Option<f64>,
    pub mean_recon_pseudo_diff_healthy: Option<f64>,
    pub cases: Vec<CaseRow>,
}

impl EvalReport {
    pub fn from_rows(run_id: &str, method: &str, threshold: f32, cases: Vec<CaseRow>) -> Self {
        let dice = |want: Option<Label>| -> Vec<f64> {
            cases.iter().filter(|r| want.map_or(true, |l| r.label == l)).map(|r| r.dice).collect()
        };
        let healthy_rows = || cases.iter().filter(|r| r.label == Label::Healthy);
        EvalReport {
            run_id: run_id.to_string(),
            method: method.to_string(),
            threshold,
            healthy: GroupStats::from_values(&dice(Some(Label::Healthy))),
            disease: GroupStats::from_values(&dice(Some(Label::Disease))),
            overall: GroupStats::from_values(&dice(None)),
            mean_fp_voxels_healthy: mean_of(healthy_rows().map(|r| r.fp_voxels as f64)),
            mean_lesion_suppression: mean_of(cases.iter().filter_map(|r| r.lesion_suppression_ratio)),
            mean_recon_pseudo_diff_healthy: mean_of(healthy_rows().filter_map(|r| r.recon_pseudo_diff)),
            cases,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(s, "run {}  method {}  threshold {}", self.run_id, self.method, self.threshold);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10} {:>5} {:>8} {:>8}", "group", "n", "dice", "std");
        for (name, g) in [("healthy", &self.healthy), ("disease", &self.disease), ("overall", &self.overall)] {
            let _ = writeln!(s, "{name:<10} {:>5} {:>8.4} {:>8.4}", g.n, g.mean, g.std);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "mean fp voxels (healthy)      {}", opt(self.mean_fp_voxels_healthy));
        let _ = writeln!(s, "mean lesion suppression       {}", opt(self.mean_lesion_suppression));
        let _ = writeln!(s, "mean |R-P| per voxel (healthy) {}", opt(self.mean_recon_pseudo_diff_healthy));
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<20} {:<8} {:>8} {:>9} {:>11} {:>9}", "case", "label", "dice", "fp_voxels", "suppression", "|R-P|");
        for r in &self.cases {
            let _ = writeln!(
                s,
                "{:<20} {:<8} {:>8.4} {:>9} {:>11} {:>9}",
                r.case_id,
                r.label,
                r.dice,
                r.fp_voxels,
                opt(r.lesion_suppression_ratio),
                opt(r.recon_pseudo_diff)
            );
        }
        s
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_atomic(&dir.join("report.txt"), self.to_text().as_bytes())?;
        io::write_atomic(&dir.join("report.json"), self.to_json()?.as_bytes())
    }
}

pub fn case_row(case: &CaseRecord, inf: &Inference, threshold: f32) -> Result<CaseRow> {
    let pred = inf.probs.binarize(threshold);
    let (suppression, diff) = match (&inf.recon, &inf.pseudo_healthy) {
        (Some(r), Some(p)) => {
            let s = match case.label {
                Label::Disease => lesion_suppression_ratio(&r.image, &p.image, &case.gt_mask),
                Label::Healthy => None,
            };
            (s, Some(mean_abs_diff(&r.image, &p.image)))
        }
        _ => (None, None),
    };
    Ok(CaseRow {
        case_id: case.case_id.clone(),
        label: case.label,
        dice: dice_metric(&pred, &case.gt_mask)?,
        fp_voxels: false_positive_voxels(&pred, &case.gt_mask),
        lesion_suppression_ratio: suppression,
        recon_pseudo_diff: diff,
    })
}

pub fn evaluate_model(model: &mut Model, cases: &[CaseRecord], threshold: f32, run_id: &str) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Data("no cases to evaluate".into()));
    }
    let rows = cases
        .iter()
        .map(|c| {
            let inf = model.infer(&c.volume)?;
            case_row(c, &inf, threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(run_id, &model.cfg.method.to_string(), threshold, rows))
}

pub fn evaluate(checkpoint: &Path, cases: &[CaseRecord], threshold: f32) -> Result<EvalReport> {
    let mut model = Model::load(checkpoint)?;
    evaluate_model(&mut model, cases, threshold, &run_id_of(checkpoint))
}

/// The run directory name, or the checkpoint file stem when it has none.
pub fn run_id_of(checkpoint: &Path) -> String {
    checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| checkpoint.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn montage_name(run_id: &str, case_id: &str) -> String {
    format!("{run_id}_{case_id}.png")
}

const PANEL_GAP: u32 = 2;
const FALSE_POSITIVE: Rgb<u8> = Rgb([230, 30, 30]);

fn gray(v: f32) -> Rgb<u8> {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([g, g, g])
}

/// Central slice of `g` across `axis` as rows of values.
fn central_slice(g: &Grid3, axis: usize) -> Vec<Vec<f32>> {
    let [d, h, w] = g.dims();
    match axis {
        0 => (0..h).map(|y| (0..w).map(|x| g.get(d / 2, y, x)).collect()).collect(),
        1 => (0..d).map(|z| (0..w).map(|x| g.get(z, h / 2, x)).collect()).collect(),
        _ => (0..d).map(|z| (0..h).map(|y| g.get(z, y, w / 2)).collect()).collect(),
    }
}

/// Panels `X, M_GT, M, R, P, |R−P|` left to right, one row per orthogonal
/// central slice. False-positive voxels of `M` are drawn red.
pub fn montage(case: &CaseRecord, inf: &Inference, threshold: f32) -> RgbImage {
    let n = case.volume.dims()[0] as u32;
    let blank = Grid3::zeros(case.volume.dims());
    let pred = inf.probs.binarize(threshold);
    let r = inf.recon.as_ref().map_or(&blank, |o| &o.image.0);
    let p = inf.pseudo_healthy.as_ref().map_or(&blank, |o| &o.image.0);
    let mut diff = blank.clone();
    if inf.pseudo_healthy.is_some() {
        for ((d, a), b) in diff.data_mut().iter_mut().zip(r.data()).zip(p.data()) {
            *d = (a - b).abs();
        }
    }
    let panels: [&Grid3; 6] = [&case.volume, &case.gt_mask, &pred, r, p, &diff];
    let step = n + PANEL_GAP;
    let mut img = RgbImage::new(6 * step - PANEL_GAP, 3 * step - PANEL_GAP);
    for axis in 0..3 {
        let gt = central_slice(&case.gt_mask, axis);
        for (k, g) in panels.iter().enumerate() {
            let s = central_slice(g, axis);
            for (row, vals) in s.iter().enumerate() {
                for (col, &v) in vals.iter().enumerate() {
                    let px = if k == 2 && v >= 0.5 && gt[row][col] < 0.5 { FALSE_POSITIVE } else { gray(v) };
                    img.put_pixel(k as u32 * step + col as u32, axis as u32 * step + row as u32, px);
                }
            }
        }
    }
    img
}

/// Writes `{run_id}_{case_id}.png` into `dir` and returns its path.
pub fn render_case(model: &mut Model, case: &CaseRecord, run_id: &str, dir: &Path, threshold: f32) -> Result<PathBuf> {
    let inf = model.infer(&case.volume)?;
    let img = montage(case, &inf, threshold);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(montage_name(run_id, &case.case_id));
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("encoding montage: {e}")))?;
    io::write_atomic(&path, &bytes)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f32]) -> Mask {
        Mask::from_vec([1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
        let e = mask(&[0.0; 4]);
        assert_eq!(dice_metric(&e, &e).unwrap(), 1.0);
        let b = mask(&[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(dice_metric(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_metric(&e, &a).unwrap(), 0.0);
        assert!(dice_metric(&a, &mask(&[0.0; 3])).is_err());
    }

    #[test]
    fn suppression_ratio_compares_inside_the_lesion() {
        let gt = mask(&[0.0, 1.0, 1.0]);
        let r = Grid3::from_vec([1, 1, 3], vec![0.1, 0.8, 0.6]).unwrap();
        let p = Grid3::from_vec([1, 1, 3], vec![0.9, 0.2, 0.1]).unwrap();
        let s = lesion_suppression_ratio(&r, &p, &gt).unwrap();
        assert!((s - (1.0 - 0.3 / 1.4)).abs() < 1e-6);
        assert_eq!(lesion_suppression_ratio(&r, &p, &mask(&[0.0; 3])), None);
    }

    #[test]
    fn group_means_follow_rows() {
        let row = |id: &str, label, dice| CaseRow {
            case_id: id.into(),
            label,
            dice,
            fp_voxels: 0,
            lesion_suppression_ratio: None,
            recon_pseudo_diff: None,
        };
        let r = EvalReport::from_rows(
            "r",
            "m",
            0.5,
            vec![row("a", Label::Healthy, 1.0), row("b", Label::Healthy, 0.0), row("c", Label::Disease, 0.7)],
        );
        assert_eq!(r.healthy.mean, 0.5);
        assert_eq!(r.healthy.std, 0.5);
        assert_eq!(r.disease.n, 1);
        assert!((r.overall.mean - 1.7 / 3.0).abs() < 1e-12);
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
