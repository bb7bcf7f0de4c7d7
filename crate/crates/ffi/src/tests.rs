use super::*;
use smoothcert::nn::ModelSpec;
use smoothcert::norms::NormKind;

fn saved_model(dir: &Path) -> (std::path::PathBuf, Model<f32>) {
    let spec = ModelSpec::conv_net([1, 6, 6], &[3], NormKind::Layer, None, 3);
    let model = Model::<f32>::new(spec, 4).unwrap();
    let path = dir.join("m.smck");
    smoothcert::checkpoint::save(&model, &path).unwrap();
    (path, model)
}

fn load(path: &Path) -> *mut SmcModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { smc_model_load(c.as_ptr(), &mut h) }, SmcStatus::Ok);
    h
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(smc_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn certify_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    let h = load(&path);
    assert_eq!(unsafe { smc_model_num_classes(h) }, 3);
    assert_eq!(unsafe { smc_model_input_len(h) }, 36);

    let x: Vec<f32> = (0..36).map(|i| (i as f32 * 0.37).sin()).collect();
    let mut p = smc_default_params(0.25, 9);
    p.n = 500;
    p.n0 = 50;
    let mut out = SmcCertification::default();
    assert_eq!(unsafe { smc_certify(h, x.as_ptr(), x.len(), 7, &p, &mut out) }, SmcStatus::Ok);
    let want = certify::certify(&model, &x, 7, &to_params(&p)).unwrap();
    assert_eq!(out.predicted as usize, want.predicted);
    assert_eq!(out.count, want.k());
    assert_eq!(out.p_lower, want.p_lower);
    assert_eq!(out.radius, want.radius.unwrap_or(0.0));
    assert_eq!(out.abstained == 1, want.abstained());

    let mut class = 99;
    assert_eq!(unsafe { smc_predict(h, x.as_ptr(), x.len(), 7, &p, &mut class) }, SmcStatus::Ok);
    let want = certify::predict(&model, &x, 7, &to_params(&p)).unwrap();
    assert_eq!(class, want.map_or(-1, |c| c as i64));
    unsafe { smc_model_free(h) };
}

#[test]
fn errors_set_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("absent.smck").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { smc_model_load(missing.as_ptr(), &mut h) }, SmcStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("absent.smck"));

    let junk = dir.path().join("junk.smck");
    std::fs::write(&junk, b"SMCKxxxx").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { smc_model_load(junk.as_ptr(), &mut h) }, SmcStatus::BadCheckpoint);

    let (path, _) = saved_model(dir.path());
    let h = load(&path);
    let x = [0f32; 10];
    let p = smc_default_params(0.25, 1);
    let mut out = SmcCertification::default();
    assert_eq!(unsafe { smc_certify(h, x.as_ptr(), x.len(), 0, &p, &mut out) }, SmcStatus::ShapeMismatch);
    assert_eq!(unsafe { smc_certify(h, ptr::null(), 36, 0, &p, &mut out) }, SmcStatus::NullPointer);
    let x = [0f32; 36];
    let bad = smc_default_params(-1.0, 1);
    assert_eq!(unsafe { smc_certify(h, x.as_ptr(), 36, 0, &bad, &mut out) }, SmcStatus::InvalidArgument);
    assert!(last_error().contains("sigma"));
    unsafe { smc_model_free(h) };
    unsafe { smc_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { smc_model_num_classes(ptr::null()) }, 0);
}

#[test]
fn statistics_entry_points() {
    let mut v = 0.0;
    assert_eq!(unsafe { smc_inv_norm_cdf(0.975, &mut v) }, SmcStatus::Ok);
    assert!((v - 1.959_963_984_540_054).abs() < 1e-12);
    assert_eq!(unsafe { smc_inv_norm_cdf(1.5, &mut v) }, SmcStatus::InvalidArgument);
    assert_eq!(unsafe { smc_clopper_pearson_lower(10, 10, 0.001, &mut v) }, SmcStatus::Ok);
    assert!((v - 0.001f64.powf(0.1)).abs() < 1e-14);
    assert_eq!(unsafe { smc_clopper_pearson_lower(11, 10, 0.001, &mut v) }, SmcStatus::InvalidArgument);
    assert_eq!(unsafe { smc_clopper_pearson_lower(1, 10, 0.001, ptr::null_mut()) }, SmcStatus::NullPointer);
}
