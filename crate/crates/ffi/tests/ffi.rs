use std::ffi::{c_char, CStr, CString};
use std::ptr;

use pie_core::checkpoint::Checkpoint;
use pie_core::config::TrainConfig;
use pie_core::model::PieModel;
use pie_core::optim::AdamState;
use pie_core::Tensor;
use pie_ffi::*;

fn saved_model(dir: &std::path::Path) -> (std::path::PathBuf, PieModel) {
    let cfg = TrainConfig::new(0.1, 1, 4, vec![2]);
    let mut model = PieModel::new(cfg.architecture(&[4]), cfg.seed).unwrap();
    model.perturb_parameters(9, 0.3);
    let ck = Checkpoint::capture(&cfg, &model, &AdamState::new(model.params()), 0);
    let path = dir.join("model.json");
    ck.save(&path).unwrap();
    // reload through the same path the library uses
    let (reloaded, _) = Checkpoint::load(&path).unwrap().restore().unwrap();
    (path, reloaded)
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        pie_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

unsafe fn load(path: &std::path::Path) -> *mut PieModelHandle {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(pie_model_load(c.as_ptr(), &mut h), PieStatus::Ok);
    h
}

#[test]
fn matches_library_results() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    unsafe {
        let h = load(&path);
        let (mut d_in, mut d_lat) = (0usize, 0usize);
        assert_eq!(pie_model_dims(h, &mut d_in, &mut d_lat), PieStatus::Ok);
        assert_eq!((d_in, d_lat), (4, 2));

        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.31).sin()).collect();
        let xt = Tensor::new(vec![3, 4], x.clone()).unwrap();
        let mut z = vec![0.0; 6];
        assert_eq!(pie_model_encode(h, x.as_ptr(), 3, z.as_mut_ptr()), PieStatus::Ok);
        assert_eq!(z, model.encode(&xt).unwrap().z.data());

        let mut back = vec![0.0; 12];
        assert_eq!(pie_model_decode(h, z.as_ptr(), 3, back.as_mut_ptr()), PieStatus::Ok);
        assert_eq!(back, model.reconstruct(&xt).unwrap().data());

        let mut ll = vec![0.0; 3];
        assert_eq!(pie_model_log_likelihood(h, x.as_ptr(), 3, ll.as_mut_ptr()), PieStatus::Ok);
        assert_eq!(ll, model.log_likelihood(&xt).unwrap());

        let (mut a, mut b) = (vec![0.0; 8], vec![0.0; 8]);
        assert_eq!(pie_model_sample(h, 2, 0.5, 17, a.as_mut_ptr()), PieStatus::Ok);
        assert_eq!(pie_model_sample(h, 2, 0.5, 17, b.as_mut_ptr()), PieStatus::Ok);
        assert_eq!(a, b);
        pie_model_free(h);
    }
}

#[test]
fn reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(pie_model_load(ptr::null(), &mut h), PieStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
        assert_eq!(pie_model_load(missing.as_ptr(), &mut h), PieStatus::Checkpoint);
        assert!(h.is_null());

        let mut z = [0.0; 2];
        assert_eq!(pie_model_encode(ptr::null(), [0.0; 4].as_ptr(), 1, z.as_mut_ptr()), PieStatus::NullPointer);

        let (path, _) = saved_model(dir.path());
        let h = load(&path);
        assert_eq!(pie_model_encode(h, [0.0; 4].as_ptr(), 0, z.as_mut_ptr()), PieStatus::InvalidArgument);
        assert_eq!(pie_model_sample(h, 1, -1.0, 0, [0.0; 4].as_mut_ptr()), PieStatus::InvalidArgument);
        pie_model_free(h);
        pie_model_free(ptr::null_mut());

        let needed = pie_last_error_message(ptr::null_mut(), 0);
        assert!(needed > 0);
        let mut tiny = [1 as c_char; 4];
        pie_last_error_message(tiny.as_mut_ptr(), 4);
        assert_eq!(tiny[3], 0);
    }
}

#[test]
fn sharpness_of_constant_images_is_zero() {
    let imgs = vec![0.4; 2 * 5 * 5];
    let mut out = -1.0;
    unsafe {
        assert_eq!(pie_sharpness(imgs.as_ptr(), 2, 5, 5, &mut out), PieStatus::Ok);
        assert_eq!(out, 0.0);
        assert_eq!(pie_sharpness(imgs.as_ptr(), 1, 2, 2, &mut out), PieStatus::InvalidArgument);
        assert_eq!(CStr::from_ptr(pie_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pie.h")).unwrap();
    for name in [
        "pie_model_load",
        "pie_model_free",
        "pie_model_dims",
        "pie_model_encode",
        "pie_model_decode",
        "pie_model_log_likelihood",
        "pie_model_sample",
        "pie_sharpness",
        "pie_last_error_message",
        "PIE_STATUS_OK",
        "typedef struct PieModelHandle PieModelHandle",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
