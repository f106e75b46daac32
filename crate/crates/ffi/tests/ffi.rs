use std::ffi::{CStr, CString};
use std::ptr;

use pws_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pws_last_error()).to_string_lossy().into_owned() }
}

fn options(method: PwsMethod) -> PwsCertifyOptions {
    PwsCertifyOptions {
        axis: PwsAxis::Tz,
        radius: 0.01,
        method,
        sigma: 0.25,
        n_samples: 200,
        confidence_alpha: 0.001,
        quantile: 0.99,
        resolution: 1001,
        delta: 1e-3,
        seed: 7,
    }
}

#[test]
fn cloud_handles_round_trip() {
    let xyz = [0.0, 0.0, 2.0, 0.1, -0.1, 3.0];
    let colors = [0.2f32, 0.8];
    let mut cloud = ptr::null_mut();
    unsafe {
        assert_eq!(pws_cloud_new(xyz.as_ptr(), colors.as_ptr(), 2, 1, &mut cloud), PwsStatus::Ok);
        assert_eq!(pws_cloud_len(cloud), 2);
        pws_cloud_free(cloud);
        assert_eq!(pws_cloud_len(ptr::null()), 0);
        pws_cloud_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut cloud = ptr::null_mut();
    unsafe {
        assert_eq!(pws_cloud_new(ptr::null(), ptr::null(), 3, 1, &mut cloud), PwsStatus::NullPointer);
        assert!(last_error().starts_with("NullPointer: "));
        let xyz = [0.0, 0.0, 2.0];
        let colors = [0.5f32, 0.5];
        assert_eq!(pws_cloud_new(xyz.as_ptr(), colors.as_ptr(), 1, 0, &mut cloud), PwsStatus::InvalidInput);
        assert!(last_error().starts_with("InvalidInput: "), "{}", last_error());

        let missing = CString::new("/nonexistent/cloud.pwspc").unwrap();
        assert_eq!(pws_cloud_read(missing.as_ptr(), &mut cloud), PwsStatus::IoError);

        let mut q = 0.0;
        assert_eq!(pws_gaussian_quantile(1.0, &mut q), PwsStatus::DomainError);
        assert_eq!(pws_gaussian_quantile(0.975, &mut q), PwsStatus::Ok);
        assert!((q - 1.959_963_984_540_054).abs() < 1e-9);
    }
    assert!(pws_clopper_pearson_lower(5, 3, 0.05).is_nan());
    assert!((pws_clopper_pearson_lower(100, 100, 0.001) - 0.001f64.powf(0.01)).abs() < 1e-12);
}

#[test]
fn partition_and_certify_a_generated_scene() {
    let dir = tempfile::tempdir().unwrap();
    let cam = pws_camera_default();
    assert_eq!((cam.width, cam.height), (64, 64));
    let model_path = dir.path().join("model.bin");
    {
        use pws_core::classifier::{builtin_train, TrainConfig};
        use pws_core::rasterizer::{default_background, render};
        use pws_core::scenes::{generate_corpus, SceneParams, ShapeClass};
        let params = SceneParams::default();
        let corpus = generate_corpus(&[ShapeClass::Billboard, ShapeClass::BoxFace], 3, &params, 1).unwrap();
        let zero = pws_core::MotionSpec::new(pws_core::Axis::Tx, 1.0).unwrap().value(0.0).unwrap();
        let data: Vec<_> = corpus
            .scenes
            .iter()
            .map(|s| (render(&s.cloud, &zero, &params.camera, &default_background(3)).unwrap(), s.label))
            .collect();
        let model = builtin_train(&data, &TrainConfig { noise_sigma: 0.25, ..TrainConfig::default() }).unwrap();
        model.save(&model_path).unwrap();
    }

    let (mut cloud, mut model, mut report) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let path = CString::new(model_path.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(pws_scene_generate(PwsShapeClass::Billboard, 11, &mut cloud), PwsStatus::Ok);
        assert!(pws_cloud_len(cloud) > 1000);
        assert_eq!(pws_model_load(path.as_ptr(), &mut model), PwsStatus::Ok);

        let (mut exact_delta, mut exact_n) = (0.0, 0);
        let (mut lip_delta, mut lip_n) = (0.0, 0);
        assert_eq!(pws_partition(cloud, &cam, &options(PwsMethod::Exact), &mut exact_delta, &mut exact_n), PwsStatus::Ok);
        assert_eq!(pws_partition(cloud, &cam, &options(PwsMethod::Lipschitz), &mut lip_delta, &mut lip_n), PwsStatus::Ok);
        assert!(lip_delta <= exact_delta && lip_n >= exact_n);

        let mut bad = options(PwsMethod::OneFrame);
        bad.delta = 50.0;
        assert_eq!(pws_partition(cloud, &cam, &bad, &mut exact_delta, &mut exact_n), PwsStatus::NegativeMargin);
        assert!(last_error().starts_with("NegativeMargin: "));

        assert_eq!(pws_certify(cloud, model, &cam, &options(PwsMethod::Exact), &mut report), PwsStatus::Ok);
        let mut verdict = PwsVerdict::Abstain;
        assert_eq!(pws_report_verdict(report, &mut verdict), PwsStatus::Ok);
        assert!(pws_report_n(report) >= 2);
        assert!(pws_report_margin(report).is_finite());
        let mut json = ptr::null_mut();
        assert_eq!(pws_report_json(report, &mut json), PwsStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        pws_string_free(json);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["N"].as_u64().unwrap() as usize, pws_report_n(report));
        assert!(value.get("timing").is_none());

        assert_eq!(pws_certify(cloud, ptr::null(), &cam, &options(PwsMethod::Exact), &mut report), PwsStatus::NullPointer);
        pws_report_free(report);
        pws_model_free(model);
        pws_cloud_free(cloud);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/pws.h")).unwrap();
    for name in [
        "pws_certify",
        "pws_partition",
        "pws_cloud_new",
        "pws_cloud_free",
        "pws_model_load",
        "pws_report_json",
        "pws_string_free",
        "pws_last_error",
        "PWS_STATUS_NEGATIVE_MARGIN",
        "typedef struct PwsCloud PwsCloud",
    ] {
        assert!(header.contains(name), "{name} missing from pws.h");
    }
}
