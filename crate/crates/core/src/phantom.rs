//! Deterministic synthetic lower-torso phantoms.
//!
//! Each case is a low-uptake body ellipsoid carrying a bright bladder-like
//! organ near the volume center, optional flanking kidney-like organs and,
//! for disease cases, lesion blobs that never overlap an organ core. Blobs
//! use a super-Gaussian profile `exp(-ln2 · ρ⁴)` in the normalized
//! ellipsoidal radius `ρ`, so the half-maximum contour sits exactly on the
//! lesion mask boundary `ρ = 1`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid3, Mask, Volume};

const PLACEMENT_ATTEMPTS: usize = 1000;
const BODY_LEVEL: f32 = 0.12;
const AIR_LEVEL: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Disease,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Healthy => "healthy",
            Label::Disease => "disease",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(Label::Healthy),
            "disease" => Ok(Label::Disease),
            other => Err(Error::Format(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// One preprocessed case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub volume: Volume,
    pub gt_mask: Mask,
    pub label: Label,
    pub case_id: String,
    pub split: Split,
}

impl CaseRecord {
    /// Checks the label/mask, range and shape invariants.
    pub fn validate(&self) -> Result<()> {
        if self.volume.dims() != self.gt_mask.dims() {
            return Err(Error::Data(format!(
                "case {}: volume shape {:?} differs from mask shape {:?}",
                self.case_id,
                self.volume.dims(),
                self.gt_mask.dims()
            )));
        }
        if !self.gt_mask.is_binary() {
            return Err(Error::Data(format!("case {}: ground-truth mask is not binary", self.case_id)));
        }
        let positive = self.gt_mask.count_positive();
        match self.label {
            Label::Healthy if positive > 0 => {
                return Err(Error::Data(format!("case {}: healthy case with lesion voxels", self.case_id)))
            }
            Label::Disease if positive == 0 => {
                return Err(Error::Data(format!("case {}: disease case with empty mask", self.case_id)))
            }
            _ => {}
        }
        if self.volume.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("case {}: intensities outside [0, 1]", self.case_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub grid_size: usize,
    /// Bladder plus `n - 1` kidney-like organs.
    pub n_healthy_organs: usize,
    pub organ_intensity_range: (f64, f64),
    pub lesion_intensity_range: (f64, f64),
    pub lesion_count_range: (usize, usize),
    /// Per-axis lesion semi-axis range, in voxels.
    pub blob_radius_range: (f64, f64),
    /// Per-axis bladder semi-axis range, in voxels. Kidney-like organs use
    /// 0.6 of this range.
    pub organ_radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec::desk()
    }
}

impl PhantomSpec {
    /// 32³ phantoms.
    pub fn desk() -> Self {
        PhantomSpec {
            grid_size: 32,
            n_healthy_organs: 3,
            organ_intensity_range: (0.6, 1.0),
            lesion_intensity_range: (0.5, 0.9),
            lesion_count_range: (1, 3),
            blob_radius_range: (2.0, 3.5),
            organ_radius_range: (4.0, 6.0),
            noise_sigma: 0.03,
            seed: 0,
        }
    }

    /// 64³ phantoms with all lengths doubled.
    pub fn full_scale() -> Self {
        PhantomSpec {
            grid_size: 64,
            blob_radius_range: (4.0, 7.0),
            organ_radius_range: (8.0, 12.0),
            ..PhantomSpec::desk()
        }
    }

    /// Same phantom with every length rescaled to a `grid_size` cube.
    pub fn scaled_to(&self, grid_size: usize) -> Self {
        let f = grid_size as f64 / self.grid_size as f64;
        let scale = |(lo, hi): (f64, f64)| ((lo * f).max(1.0), (hi * f).max(1.0));
        PhantomSpec {
            grid_size,
            blob_radius_range: scale(self.blob_radius_range),
            organ_radius_range: scale(self.organ_radius_range),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        let unit = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        if self.grid_size < 16 {
            return bad("grid_size must be at least 16");
        }
        if self.n_healthy_organs < 1 {
            return bad("n_healthy_organs must be at least 1");
        }
        if !unit(self.organ_intensity_range) {
            return bad("organ_intensity_range must be a nonempty interval within (0, 1]");
        }
        if !unit(self.lesion_intensity_range) {
            return bad("lesion_intensity_range must be a nonempty interval within (0, 1]");
        }
        let (cmin, cmax) = self.lesion_count_range;
        if cmin < 1 || cmin > cmax {
            return bad("lesion_count_range must be a nonempty interval of counts >= 1");
        }
        let half = self.grid_size as f64 / 2.0;
        for (name, (lo, hi)) in [("blob_radius_range", self.blob_radius_range), ("organ_radius_range", self.organ_radius_range)] {
            if !(lo >= 1.0 && lo <= hi && hi < half / 2.0) {
                return Err(Error::Validation(format!(
                    "{name} must satisfy 1 <= lo <= hi < grid_size / 4"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a nonnegative finite number");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    amplitude: f64,
}

impl Blob {
    fn rho2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum()
    }

    fn profile(&self, p: [f64; 3]) -> f64 {
        let r2 = self.rho2(p);
        self.amplitude * (-std::f64::consts::LN_2 * r2 * r2).exp()
    }

    fn max_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }
}

fn mix_seed(spec_seed: u64, label: Label, case_seed: u64) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let tag = match label {
        Label::Healthy => 0x68,
        Label::Disease => 0x64,
    };
    let mut z = spec_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(case_seed.rotate_left(17))
        .wrapping_add(tag);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Generates one case; `split` defaults to train and is reassigned by
/// [`generate_dataset`].
pub fn generate_case(spec: &PhantomSpec, label: Label, case_seed: u64) -> Result<CaseRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, label, case_seed));
    let n = spec.grid_size;
    let nf = n as f64;
    let mid = (nf - 1.0) / 2.0;
    let body = Blob { center: [mid, mid, mid], radii: [0.46 * nf, 0.40 * nf, 0.46 * nf], amplitude: 1.0 };

    let mut organs = Vec::with_capacity(spec.n_healthy_organs);
    let jitter = nf / 16.0;
    let bladder_center = [0, 1, 2].map(|_| mid + rng.gen_range(-jitter..=jitter));
    organs.push(Blob {
        center: bladder_center,
        radii: [0, 1, 2].map(|_| uniform(&mut rng, spec.organ_radius_range)),
        amplitude: uniform(&mut rng, spec.organ_intensity_range),
    });
    let (olo, ohi) = spec.organ_radius_range;
    for k in 1..spec.n_healthy_organs {
        // kidney-like organs sit superior to the bladder, alternating sides
        let side = if k % 2 == 1 { 1.0 } else { -1.0 };
        let tier = ((k - 1) / 2) as f64;
        let anchor = [mid - nf * (0.22 + 0.08 * tier), mid + nf * 0.05, mid + side * nf * 0.26];
        organs.push(Blob {
            center: anchor.map(|c| (c + rng.gen_range(-1.5..=1.5)).clamp(2.0, nf - 3.0)),
            radii: [0, 1, 2].map(|_| uniform(&mut rng, (0.6 * olo, 0.6 * ohi))),
            amplitude: uniform(&mut rng, spec.organ_intensity_range),
        });
    }

    let mut lesions = Vec::new();
    if label == Label::Disease {
        let (cmin, cmax) = spec.lesion_count_range;
        let count = rng.gen_range(cmin..=cmax);
        let rmax = spec.blob_radius_range.1;
        let margin = rmax + 1.0;
        for i in 0..count {
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cand = Blob {
                    center: [0, 1, 2].map(|_| rng.gen_range(margin..=nf - 1.0 - margin)),
                    radii: [0, 1, 2].map(|_| uniform(&mut rng, spec.blob_radius_range)),
                    amplitude: uniform(&mut rng, spec.lesion_intensity_range),
                };
                // the lesion must lie inside the body and clear every organ core
                if body.rho2(cand.center) > 0.6 {
                    continue;
                }
                let clear = organs.iter().all(|o| {
                    let d = (0..3).map(|a| (o.center[a] - cand.center[a]).powi(2)).sum::<f64>().sqrt();
                    d >= cand.max_radius() + 0.5 * o.max_radius()
                });
                if clear {
                    placed = Some(cand);
                    break;
                }
            }
            match placed {
                Some(b) => lesions.push(b),
                None => {
                    return Err(Error::Placement {
                        what: format!("lesion {i} of case seed {case_seed}"),
                        attempts: PLACEMENT_ATTEMPTS,
                    })
                }
            }
        }
    }

    let dims = [n, n, n];
    let mut volume = Grid3::zeros(dims);
    let mut mask = Grid3::zeros(dims);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let b = body.profile(p);
                let mut v = AIR_LEVEL as f64 + (BODY_LEVEL - AIR_LEVEL) as f64 * b;
                v += organs.iter().map(|o| o.profile(p)).sum::<f64>();
                v += lesions.iter().map(|l| l.profile(p)).sum::<f64>();
                if spec.noise_sigma > 0.0 {
                    let e: f64 = rng.sample(StandardNormal);
                    v += spec.noise_sigma * e;
                }
                volume.set(z, y, x, v.clamp(0.0, 1.0) as f32);
                if lesions.iter().any(|l| l.rho2(p) <= 1.0) {
                    mask.set(z, y, x, 1.0);
                }
            }
        }
    }
    let record = CaseRecord {
        volume: Volume(volume),
        gt_mask: Mask(mask),
        label,
        case_id: format!("{label}_{case_seed:04}"),
        split: Split::Train,
    };
    if label == Label::Disease && record.gt_mask.count_positive() == 0 {
        return Err(Error::Placement { what: "lesion with empty voxel support".into(), attempts: 1 });
    }
    Ok(record)
}

/// Per-label split sizes `(train, val, test)` for `n` cases.
pub fn split_counts(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let val = (n as f64 * fractions.1).round() as usize;
    let test = (n as f64 * fractions.2).round() as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    (n - val - test, val, test)
}

/// Stratified dataset: each label is split independently, so every split
/// carries both labels whenever the counts allow it.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n_healthy: usize,
    n_disease: usize,
    split_fractions: (f64, f64, f64),
) -> Result<Vec<CaseRecord>> {
    spec.validate()?;
    let (ft, fv, fs) = split_fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({ft}, {fv}, {fs}) must be in [0, 1] and sum to 1"
        )));
    }
    let mut assignments = Vec::new();
    let mut totals = [0usize; 3];
    for (label, count) in [(Label::Healthy, n_healthy), (Label::Disease, n_disease)] {
        let (tr, va, te) = split_counts(count, split_fractions);
        totals[0] += tr;
        totals[1] += va;
        totals[2] += te;
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, label, u64::MAX));
        order.shuffle(&mut rng);
        for (rank, idx) in order.into_iter().enumerate() {
            let split = if rank < tr {
                Split::Train
            } else if rank < tr + va {
                Split::Val
            } else {
                Split::Test
            };
            assignments.push((label, idx, split));
        }
    }
    for (total, (name, frac)) in totals.iter().zip([("train", ft), ("val", fv), ("test", fs)]) {
        if frac > 0.0 && *total == 0 {
            return Err(Error::Config(format!(
                "cannot stratify {n_healthy} healthy + {n_disease} disease cases: split {name} would be empty"
            )));
        }
    }
    assignments.sort_by_key(|&(label, idx, _)| (label == Label::Disease, idx));
    assignments
        .into_iter()
        .map(|(label, idx, split)| {
            let mut case = generate_case(spec, label, idx as u64)?;
            case.split = split;
            Ok(case)
        })
        .collect()
}
