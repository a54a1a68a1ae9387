use std::ffi::{CStr, CString};
use std::ptr;

use dseg::model::{Method, Model};
use dseg::trainer::TrainConfig;
use dseg_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dseg_last_error()) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &std::path::Path, method: Method) -> CString {
    let mut cfg = TrainConfig { method, ..TrainConfig::default() };
    cfg.encoder.base_channels = 2;
    cfg.encoder.n_levels = 3;
    cfg.encoder.latent_channels = 4;
    let mut model = Model::new(&cfg.model_config(16)).unwrap();
    let path = dir.join(format!("{method}.ckpt"));
    model.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn load(path: &CString) -> *mut DsegModel {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dseg_model_load(path.as_ptr(), &mut handle) }, DsegStatus::Ok, "{}", last_error());
    assert!(!handle.is_null());
    handle
}

#[test]
fn missing_checkpoint_reports_the_path() {
    let path = CString::new("/nonexistent/dir/model.ckpt").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { dseg_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, DsegStatus::Load);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent/dir/model.ckpt"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { dseg_model_load(ptr::null(), &mut handle) }, DsegStatus::NullArgument);
    let mut n = 0usize;
    assert_eq!(unsafe { dseg_model_grid_size(ptr::null(), &mut n) }, DsegStatus::NullArgument);
    let mut d = 0.0;
    assert_eq!(unsafe { dseg_dice(ptr::null(), ptr::null(), 0, &mut d) }, DsegStatus::NullArgument);
    unsafe { dseg_model_free(ptr::null_mut()) };
}

#[test]
fn inference_matches_the_core_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path(), Method::Disentangler);
    let handle = load(&path);
    let mut n = 0usize;
    assert_eq!(unsafe { dseg_model_grid_size(handle, &mut n) }, DsegStatus::Ok);
    assert_eq!(n, 16);
    let mut has_ph = -1;
    assert_eq!(unsafe { dseg_model_has_pseudo_healthy(handle, &mut has_ph) }, DsegStatus::Ok);
    assert_eq!(has_ph, 1);

    let len = n * n * n;
    let (mut volume, mut mask) = (vec![0.0f32; len], vec![0.0f32; len]);
    let st = unsafe { dseg_phantom_case(n, 3, DsegLabel::Disease, volume.as_mut_ptr(), mask.as_mut_ptr(), len) };
    assert_eq!(st, DsegStatus::Ok, "{}", last_error());
    assert!(mask.iter().any(|&m| m == 1.0));

    let (mut probs, mut recon, mut pseudo) = (vec![0.0f32; len], vec![0.0f32; len], vec![0.0f32; len]);
    let st = unsafe {
        dseg_model_infer(handle, volume.as_ptr(), len, probs.as_mut_ptr(), recon.as_mut_ptr(), pseudo.as_mut_ptr())
    };
    assert_eq!(st, DsegStatus::Ok, "{}", last_error());

    let mut model = Model::load(std::path::Path::new(path.to_str().unwrap())).unwrap();
    let inf = model.infer(&dseg::volume::Volume::from_vec([n; 3], volume.clone()).unwrap()).unwrap();
    assert_eq!(probs, inf.probs.data());
    assert_eq!(recon, inf.recon.unwrap().image.data());
    assert_eq!(pseudo, inf.pseudo_healthy.unwrap().image.data());

    let st = unsafe { dseg_model_infer(handle, volume.as_ptr(), len - 1, probs.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, DsegStatus::InvalidArgument);
    volume[0] = f32::NAN;
    let st = unsafe { dseg_model_infer(handle, volume.as_ptr(), len, probs.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, DsegStatus::Data);
    unsafe { dseg_model_free(handle) };
}

#[test]
fn mask_only_models_zero_the_image_buffers() {
    let dir = tempfile::tempdir().unwrap();
    let handle = load(&tiny_checkpoint(dir.path(), Method::SegOnly));
    let len = 16 * 16 * 16;
    let volume = vec![0.2f32; len];
    let (mut probs, mut recon) = (vec![0.0f32; len], vec![7.0f32; len]);
    let st = unsafe { dseg_model_infer(handle, volume.as_ptr(), len, probs.as_mut_ptr(), recon.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, DsegStatus::Ok);
    assert!(recon.iter().all(|&v| v == 0.0));
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    unsafe { dseg_model_free(handle) };
}

#[test]
fn dice_through_the_abi() {
    let pred = [1.0f32, 1.0, 0.0, 0.0];
    let gt = [0.0f32, 1.0, 1.0, 0.0];
    let mut d = 0.0;
    assert_eq!(unsafe { dseg_dice(pred.as_ptr(), gt.as_ptr(), 4, &mut d) }, DsegStatus::Ok);
    assert_eq!(d, 0.5);
    let empty = [0.0f32; 4];
    assert_eq!(unsafe { dseg_dice(empty.as_ptr(), empty.as_ptr(), 4, &mut d) }, DsegStatus::Ok);
    assert_eq!(d, 1.0);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dseg.h")).unwrap();
    for name in [
        "dseg_last_error",
        "dseg_model_load",
        "dseg_model_free",
        "dseg_model_grid_size",
        "dseg_model_has_pseudo_healthy",
        "dseg_model_infer",
        "dseg_phantom_case",
        "dseg_dice",
        "typedef struct DsegModel DsegModel",
        "DSEG_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
