//! Landmark-centered cropping, SUV clipping/normalization and resizing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::phantom::{split_counts, CaseRecord, Label, Split};
use crate::volume::{Grid3, Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub suv_clip: (f64, f64),
    pub crop_size: usize,
    pub out_size: usize,
    /// Used when the manifest has no split column.
    pub split_fractions: (f64, f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { suv_clip: (0.0, 15.0), crop_size: 128, out_size: 64, split_fractions: (0.8, 0.1, 0.1) }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.suv_clip;
        if !(lo >= 0.0 && lo < hi) {
            return Err(Error::Config(format!("suv_clip ({lo}, {hi}) must satisfy 0 <= lo < hi")));
        }
        if self.out_size == 0 || self.crop_size < self.out_size {
            return Err(Error::Config(format!(
                "crop_size {} must be >= out_size {} >= 1",
                self.crop_size, self.out_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Linear,
    Nearest,
}

/// `(clamp(v, lo, hi) - lo) / (hi - lo)` per voxel.
pub fn clip_normalize(raw: &Volume, clip: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = clip;
    if !(lo < hi) {
        return Err(Error::Config(format!("clip interval ({lo}, {hi}) is empty")));
    }
    if let Some(i) = raw.data().iter().position(|v| v.is_nan()) {
        return Err(Error::Data(format!("NaN at voxel {i}")));
    }
    let data = raw
        .data()
        .iter()
        .map(|&v| ((v as f64).clamp(lo, hi) - lo) / (hi - lo))
        .map(|v| v as f32)
        .collect();
    Volume::from_vec(raw.dims(), data)
}

/// Cube of side `crop_size` whose center voxel is `landmark`; voxels outside
/// the source are zero.
pub fn crop_at_landmark(raw: &Grid3, landmark: [i64; 3], crop_size: usize) -> Grid3 {
    let dims = raw.dims();
    let half = (crop_size / 2) as i64;
    let start = landmark.map(|l| l - half);
    let mut out = Grid3::zeros([crop_size; 3]);
    for z in 0..crop_size {
        let sz = start[0] + z as i64;
        if sz < 0 || sz >= dims[0] as i64 {
            continue;
        }
        for y in 0..crop_size {
            let sy = start[1] + y as i64;
            if sy < 0 || sy >= dims[1] as i64 {
                continue;
            }
            for x in 0..crop_size {
                let sx = start[2] + x as i64;
                if sx >= 0 && sx < dims[2] as i64 {
                    out.set(z, y, x, raw.get(sz as usize, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// Half-pixel-centered source coordinate of output index `o`.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    s.clamp(0.0, (n_in - 1) as f64)
}

/// Per-axis `(lower index, upper index, upper weight)` for linear interpolation.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = source_coord(o, n_in, n_out);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|o| (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1))
        .collect()
}

/// Resizes to a cube of side `out_size`: trilinear for intensities,
/// nearest-neighbour for masks.
pub fn resize(vol: &Grid3, out_size: usize, mode: ResizeMode) -> Result<Grid3> {
    if out_size == 0 {
        return Err(Error::Config("resize target must be >= 1".into()));
    }
    let dims = vol.dims();
    let mut out = Grid3::zeros([out_size; 3]);
    match mode {
        ResizeMode::Nearest => {
            let t: Vec<Vec<usize>> = dims.iter().map(|&n| nearest_taps(n, out_size)).collect();
            for z in 0..out_size {
                for y in 0..out_size {
                    for x in 0..out_size {
                        out.set(z, y, x, vol.get(t[0][z], t[1][y], t[2][x]));
                    }
                }
            }
        }
        ResizeMode::Linear => {
            let t: Vec<Vec<(usize, usize, f64)>> = dims.iter().map(|&n| linear_taps(n, out_size)).collect();
            for z in 0..out_size {
                let (z0, z1, wz) = t[0][z];
                for y in 0..out_size {
                    let (y0, y1, wy) = t[1][y];
                    for x in 0..out_size {
                        let (x0, x1, wx) = t[2][x];
                        let g = |a, b, c| vol.get(a, b, c) as f64;
                        let c00 = g(z0, y0, x0) * (1.0 - wx) + g(z0, y0, x1) * wx;
                        let c01 = g(z0, y1, x0) * (1.0 - wx) + g(z0, y1, x1) * wx;
                        let c10 = g(z1, y0, x0) * (1.0 - wx) + g(z1, y0, x1) * wx;
                        let c11 = g(z1, y1, x0) * (1.0 - wx) + g(z1, y1, x1) * wx;
                        let c0 = c00 * (1.0 - wy) + c01 * wy;
                        let c1 = c10 * (1.0 - wy) + c11 * wy;
                        out.set(z, y, x, (c0 * (1.0 - wz) + c1 * wz) as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Crop → resize → clip/normalize for one raw case. The mask is cropped at
/// the same landmark and resized with nearest-neighbour.
pub fn preprocess_case(
    raw_volume: &Grid3,
    raw_mask: &Grid3,
    landmark: [i64; 3],
    cfg: &PreprocessConfig,
) -> Result<(Volume, Mask)> {
    cfg.validate()?;
    if raw_volume.dims() != raw_mask.dims() {
        return Err(Error::Data(format!(
            "raw mask shape {:?} differs from volume shape {:?}",
            raw_mask.dims(),
            raw_volume.dims()
        )));
    }
    let crop = crop_at_landmark(raw_volume, landmark, cfg.crop_size);
    let small = resize(&crop, cfg.out_size, ResizeMode::Linear)?;
    let volume = clip_normalize(&Volume(small), cfg.suv_clip)?;
    let mcrop = crop_at_landmark(raw_mask, landmark, cfg.crop_size);
    let mut mask = Mask(resize(&mcrop, cfg.out_size, ResizeMode::Nearest)?);
    mask.data_mut().iter_mut().for_each(|v| *v = if *v > 0.0 { 1.0 } else { 0.0 });
    Ok((volume, mask))
}

/// One row of a raw-data manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEntry {
    pub case_id: String,
    pub volume_path: String,
    pub mask_path: String,
    pub label: Label,
    pub landmark: [i64; 3],
    pub split: Option<Split>,
}

/// Parses `case_id  volume_path  mask_path  label  landmark_zyx  [split]`,
/// tab separated, with a header line. `landmark_zyx` is `z,y,x`.
pub fn parse_raw_manifest(text: &str) -> Result<Vec<RawEntry>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 && f.len() != 6 {
            return Err(Error::Format(format!("manifest line {}: expected 5 or 6 columns", i + 1)));
        }
        let coords: Vec<i64> = f[4]
            .split(',')
            .map(|s| s.trim().parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("manifest line {}: landmark {:?}: {e}", i + 1, f[4])))?;
        let landmark: [i64; 3] = coords
            .try_into()
            .map_err(|_| Error::Format(format!("manifest line {}: landmark needs 3 values", i + 1)))?;
        rows.push(RawEntry {
            case_id: f[0].to_string(),
            volume_path: f[1].to_string(),
            mask_path: f[2].to_string(),
            label: f[3].parse()?,
            landmark,
            split: f.get(5).map(|s| s.parse()).transpose()?,
        });
    }
    Ok(rows)
}

pub fn format_raw_manifest(rows: &[RawEntry]) -> String {
    let mut s = String::from("case_id\tvolume_path\tmask_path\tlabel\tlandmark_zyx\tsplit\n");
    for r in rows {
        let [z, y, x] = r.landmark;
        s.push_str(&format!("{}\t{}\t{}\t{}\t{z},{y},{x}", r.case_id, r.volume_path, r.mask_path, r.label));
        if let Some(split) = r.split {
            s.push_str(&format!("\t{split}"));
        }
        s.push('\n');
    }
    s
}

/// Runs the pipeline over a raw manifest and writes a dataset to `out`.
/// Relative paths resolve against the manifest's directory.
pub fn run_manifest(manifest: &Path, cfg: &PreprocessConfig, out: &Path) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let rows = parse_raw_manifest(&text)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::with_capacity(rows.len());
    for row in &rows {
        let raw_volume = io::read_grid(&base.join(&row.volume_path))?;
        let raw_mask = io::read_grid(&base.join(&row.mask_path))?;
        let (volume, gt_mask) = preprocess_case(&raw_volume, &raw_mask, row.landmark, cfg)?;
        let case = CaseRecord {
            volume,
            gt_mask,
            label: row.label,
            case_id: row.case_id.clone(),
            split: row.split.unwrap_or(Split::Train),
        };
        case.validate()?;
        cases.push(case);
    }
    if rows.iter().any(|r| r.split.is_none()) {
        assign_stratified(&mut cases, cfg.split_fractions);
    }
    io::write_dataset(out, &cases)?;
    Ok(cases)
}

/// Writes cases in raw form: intensities scaled by `suv_scale`, one
/// `.dseg` volume and mask per case, and a raw manifest landmarked at the
/// volume center. Returns the manifest path.
pub fn write_raw_cases(dir: &Path, cases: &[CaseRecord], suv_scale: f32) -> Result<std::path::PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let mut raw = case.volume.0.clone();
        raw.data_mut().iter_mut().for_each(|v| *v *= suv_scale);
        let volume_path = format!("{}_volume.dseg", case.case_id);
        let mask_path = format!("{}_mask.dseg", case.case_id);
        io::write_volume(&dir.join(&volume_path), &raw)?;
        io::write_binary_mask(&dir.join(&mask_path), &case.gt_mask)?;
        let [d, h, w] = raw.dims();
        rows.push(RawEntry {
            case_id: case.case_id.clone(),
            volume_path,
            mask_path,
            label: case.label,
            landmark: [(d / 2) as i64, (h / 2) as i64, (w / 2) as i64],
            split: Some(case.split),
        });
    }
    let path = dir.join("raw_manifest.tsv");
    io::write_atomic(&path, format_raw_manifest(&rows).as_bytes())?;
    Ok(path)
}

/// Stratified split assignment in manifest order.
fn assign_stratified(cases: &mut [CaseRecord], fractions: (f64, f64, f64)) {
    for label in [Label::Healthy, Label::Disease] {
        let idx: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].label == label).collect();
        let (tr, va, _) = split_counts(idx.len(), fractions);
        for (rank, &i) in idx.iter().enumerate() {
            cases[i].split = if rank < tr {
                Split::Train
            } else if rank < tr + va {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
}
