//! C ABI over the `dseg` core: checkpoint loading, inference, phantom
//! generation and the Dice metric.
//!
//! Every function returns a [`DsegStatus`]. On failure a message is kept per
//! thread and can be read with [`dseg_last_error`]. Models are opaque
//! handles owned by the caller and released with [`dseg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dseg::eval::dice_metric;
use dseg::model::Model;
use dseg::phantom::{generate_case, Label, PhantomSpec};
use dseg::volume::{Mask, Volume};
use dseg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsegStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Data = 6,
    Numeric = 7,
    Load = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsegLabel {
    Healthy = 0,
    Disease = 1,
}

/// A loaded model. Not safe to use from two threads at once.
pub struct DsegModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DsegStatus {
    match e {
        Error::Io { .. } => DsegStatus::Io,
        Error::Format(_) => DsegStatus::Format,
        Error::Config(_) | Error::Validation(_) | Error::Scheduling(_) => DsegStatus::Config,
        Error::Data(_) | Error::Placement { .. } => DsegStatus::Data,
        Error::Numeric(_) => DsegStatus::Numeric,
        Error::Load { .. } => DsegStatus::Load,
    }
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), (DsegStatus, String)>) -> DsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DsegStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DsegStatus::Panic
        }
    }
}

fn lift<T>(r: dseg::Result<T>) -> Result<T, (DsegStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DsegStatus, String) {
    (DsegStatus::NullArgument, format!("{what} is null"))
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by the `dseg` trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dseg_model_load(path: *const c_char, out: *mut *mut DsegModel) -> DsegStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (DsegStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = lift(Model::load(&PathBuf::from(path)))?;
        *out = Box::into_raw(Box::new(DsegModel { inner: model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`dseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dseg_model_free(model: *mut DsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the cubic volumes the model accepts.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dseg_model_grid_size(model: *const DsegModel, out: *mut usize) -> DsegStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model.inner.cfg.grid_size;
        Ok(())
    })
}

/// Whether the model produces reconstructions and pseudo-healthy images
/// (1) or only masks (0).
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dseg_model_has_pseudo_healthy(model: *const DsegModel, out: *mut i32) -> DsegStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model.inner.cfg.method.is_disentangler() as i32;
        Ok(())
    })
}

/// Runs inference on one `n³` volume (row-major z, y, x; values in [0, 1]).
/// `probs` receives lesion probabilities. `recon` and `pseudo_healthy` may
/// be null; when given they are filled if the model produces them and
/// zeroed otherwise. Every buffer holds `len = n³` floats.
///
/// # Safety
/// Non-null buffers must be valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dseg_model_infer(
    model: *mut DsegModel,
    volume: *const f32,
    len: usize,
    probs: *mut f32,
    recon: *mut f32,
    pseudo_healthy: *mut f32,
) -> DsegStatus {
    guard(|| {
        let model = model.as_mut().ok_or_else(|| null("model"))?;
        if volume.is_null() {
            return Err(null("volume"));
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        let n = model.inner.cfg.grid_size;
        if len != n * n * n {
            return Err((DsegStatus::InvalidArgument, format!("expected {} voxels, got {len}", n * n * n)));
        }
        let data = std::slice::from_raw_parts(volume, len).to_vec();
        let vol = lift(Volume::from_vec([n; 3], data))?;
        lift(vol.check_finite())?;
        let inf = lift(model.inner.infer(&vol))?;
        std::slice::from_raw_parts_mut(probs, len).copy_from_slice(inf.probs.data());
        for (dst, src) in [(recon, inf.recon.as_ref()), (pseudo_healthy, inf.pseudo_healthy.as_ref())] {
            if dst.is_null() {
                continue;
            }
            let out = std::slice::from_raw_parts_mut(dst, len);
            match src {
                Some(r) => out.copy_from_slice(r.image.data()),
                None => out.fill(0.0),
            }
        }
        Ok(())
    })
}

/// Generates one desk-scale phantom case of side `grid_size` into
/// `volume` and `mask` (each `grid_size³` floats).
///
/// # Safety
/// Both buffers must be valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn dseg_phantom_case(
    grid_size: usize,
    seed: u64,
    label: DsegLabel,
    volume: *mut f32,
    mask: *mut f32,
    len: usize,
) -> DsegStatus {
    guard(|| {
        if volume.is_null() || mask.is_null() {
            return Err(null("output buffer"));
        }
        if len != grid_size.pow(3) {
            return Err((DsegStatus::InvalidArgument, format!("expected {} voxels, got {len}", grid_size.pow(3))));
        }
        let spec = PhantomSpec::desk().scaled_to(grid_size);
        let label = match label {
            DsegLabel::Healthy => Label::Healthy,
            DsegLabel::Disease => Label::Disease,
        };
        let case = lift(generate_case(&spec, label, seed))?;
        std::slice::from_raw_parts_mut(volume, len).copy_from_slice(case.volume.data());
        std::slice::from_raw_parts_mut(mask, len).copy_from_slice(case.gt_mask.data());
        Ok(())
    })
}

/// Dice coefficient of two masks of `len` voxels, each binarized at 0.5.
/// Two empty masks score 1.
///
/// # Safety
/// `pred` and `gt` must be valid for `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dseg_dice(pred: *const f32, gt: *const f32, len: usize, out: *mut f64) -> DsegStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let m = |p: *const f32| lift(Mask::from_vec([1, 1, len], std::slice::from_raw_parts(p, len).to_vec()));
        *out = lift(dice_metric(&m(pred)?, &m(gt)?))?;
        Ok(())
    })
}
