//! C ABI over `pws-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible function returns
//! a [`PwsStatus`]; on failure [`pws_last_error`] describes the most recent error
//! on the calling thread. Strings returned by the library are freed with
//! [`pws_string_free`]. Panics never unwind into C; they surface as
//! [`PwsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pws_core::certify::{certify, CertificationReport, CertifyConfig, Verdict};
use pws_core::classifier::LinearSoftmax;
use pws_core::formats::read_cloud;
use pws_core::intervals::Method;
use pws_core::scenes::{capture_camera, extract_one_frame, generate_scene, SceneParams, ShapeClass, CAPTURE_FACTOR};
use pws_core::smoothing::{clopper_pearson_lower, gaussian_quantile, SmoothingConfig};
use pws_core::{Axis, CameraModel, ColoredPointCloud, MotionSpec, Point3, PwsError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NonPositiveDepth = 3,
    ShapeMismatch = 4,
    DegenerateInterval = 5,
    NegativeMargin = 6,
    InvalidDelta = 7,
    DegenerateDataset = 8,
    DomainError = 9,
    InvalidRange = 10,
    EmptyFrame = 11,
    FormatError = 12,
    SubprocessError = 13,
    IoError = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwsAxis {
    Tx = 0,
    Ty = 1,
    Tz = 2,
    Rx = 3,
    Ry = 4,
    Rz = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwsMethod {
    Exact = 0,
    Lipschitz = 1,
    OneFrame = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwsVerdict {
    Certified = 0,
    NotCertified = 1,
    Abstain = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwsShapeClass {
    Billboard = 0,
    SphereCap = 1,
    BoxFace = 2,
    StripedWall = 3,
}

/// Pinhole intrinsics and image size.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwsCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Certification settings. `delta` is read only by the one-frame method.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwsCertifyOptions {
    pub axis: PwsAxis,
    /// Metres or radians.
    pub radius: f64,
    pub method: PwsMethod,
    pub sigma: f64,
    pub n_samples: u64,
    pub confidence_alpha: f64,
    pub quantile: f64,
    pub resolution: usize,
    pub delta: f64,
    pub seed: u64,
}

/// Opaque colored point cloud.
pub struct PwsCloud(ColoredPointCloud);

/// Opaque built-in classifier.
pub struct PwsModel(LinearSoftmax);

/// Opaque certification report.
pub struct PwsReport(CertificationReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &PwsError) -> PwsStatus {
    match e {
        PwsError::NonPositiveDepth { .. } => PwsStatus::NonPositiveDepth,
        PwsError::ShapeMismatch { .. } => PwsStatus::ShapeMismatch,
        PwsError::DegenerateInterval { .. } => PwsStatus::DegenerateInterval,
        PwsError::NegativeMargin { .. } => PwsStatus::NegativeMargin,
        PwsError::InvalidDelta(_) => PwsStatus::InvalidDelta,
        PwsError::DegenerateDataset(_) => PwsStatus::DegenerateDataset,
        PwsError::DomainError(_) => PwsStatus::DomainError,
        PwsError::InvalidRange(_) => PwsStatus::InvalidRange,
        PwsError::EmptyFrame => PwsStatus::EmptyFrame,
        PwsError::InvalidInput(_) => PwsStatus::InvalidInput,
        PwsError::Format { .. } | PwsError::Json(_) => PwsStatus::FormatError,
        PwsError::Subprocess(_) => PwsStatus::SubprocessError,
        PwsError::Io(_) => PwsStatus::IoError,
    }
}

enum Failure {
    Null(&'static str),
    Core(PwsError),
}

impl From<PwsError> for Failure {
    fn from(e: PwsError) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PwsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PwsStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("NullPointer: {what} is null"));
            PwsStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(format!("{}: {e}", e.kind()));
            status_of(&e)
        }
        Err(_) => {
            set_last_error("Panic: internal error".into());
            PwsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| PwsError::InvalidInput("path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn camera(c: &PwsCamera) -> Result<CameraModel, Failure> {
    Ok(CameraModel::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?)
}

fn axis(a: PwsAxis) -> Axis {
    match a {
        PwsAxis::Tx => Axis::Tx,
        PwsAxis::Ty => Axis::Ty,
        PwsAxis::Tz => Axis::Tz,
        PwsAxis::Rx => Axis::Rx,
        PwsAxis::Ry => Axis::Ry,
        PwsAxis::Rz => Axis::Rz,
    }
}

fn method(m: PwsMethod) -> Method {
    match m {
        PwsMethod::Exact => Method::Exact,
        PwsMethod::Lipschitz => Method::Lipschitz,
        PwsMethod::OneFrame => Method::OneFrame,
    }
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failure on this thread, or null. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pws_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pws_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pws_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// The default 64×64 camera.
#[no_mangle]
pub extern "C" fn pws_camera_default() -> PwsCamera {
    let c = pws_core::scenes::default_camera();
    PwsCamera { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height }
}

/// Builds a cloud from `n_points` xyz triples and `n_points * channels` colors.
///
/// # Safety
/// `xyz` must hold `3 * n_points` doubles and `colors` `channels * n_points` floats.
#[no_mangle]
pub unsafe extern "C" fn pws_cloud_new(
    xyz: *const f64,
    colors: *const f32,
    n_points: usize,
    channels: usize,
    out_cloud: *mut *mut PwsCloud,
) -> PwsStatus {
    guard(|| {
        let out_cloud = out(out_cloud, "out_cloud")?;
        if n_points > 0 && (xyz.is_null() || colors.is_null()) {
            return Err(Failure::Null("xyz or colors"));
        }
        let (xyz, colors) = if n_points == 0 {
            (&[][..], &[][..])
        } else {
            let n_colors = n_points.checked_mul(channels).ok_or(PwsError::InvalidInput("too many colors".into()))?;
            (std::slice::from_raw_parts(xyz, 3 * n_points), std::slice::from_raw_parts(colors, n_colors))
        };
        let points = xyz.chunks_exact(3).map(|p| Point3::new(p[0], p[1], p[2])).collect();
        *out_cloud = into_handle(PwsCloud(ColoredPointCloud::new(points, colors.to_vec(), channels)?));
        Ok(())
    })
}

/// Reads a `.pwspc` cloud file.
///
/// # Safety
/// `file` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pws_cloud_read(file: *const c_char, out_cloud: *mut *mut PwsCloud) -> PwsStatus {
    guard(|| {
        let out_cloud = out(out_cloud, "out_cloud")?;
        *out_cloud = into_handle(PwsCloud(read_cloud(&path(file)?)?));
        Ok(())
    })
}

/// Generates one synthetic scene for the default camera.
///
/// # Safety
/// `out_cloud` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pws_scene_generate(class: PwsShapeClass, seed: u64, out_cloud: *mut *mut PwsCloud) -> PwsStatus {
    guard(|| {
        let out_cloud = out(out_cloud, "out_cloud")?;
        let class = ShapeClass::ALL[class as usize];
        *out_cloud = into_handle(PwsCloud(generate_scene(class, &SceneParams::default(), seed)?.cloud));
        Ok(())
    })
}

/// Number of points, or 0 for null.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_cloud_len(cloud: *const PwsCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// # Safety
/// `cloud` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn pws_cloud_free(cloud: *mut PwsCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Loads a model written by `pws train`.
///
/// # Safety
/// `file` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pws_model_load(file: *const c_char, out_model: *mut *mut PwsModel) -> PwsStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        *out_model = into_handle(PwsModel(LinearSoftmax::load(&path(file)?)?));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn pws_model_free(model: *mut PwsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn certify_config(o: &PwsCertifyOptions, channels: usize) -> Result<(MotionSpec, CertifyConfig), Failure> {
    let spec = MotionSpec::new(axis(o.axis), o.radius)?;
    let smoothing = SmoothingConfig::new(o.sigma, o.n_samples, o.confidence_alpha, o.seed)?;
    let mut cfg = CertifyConfig::new(method(o.method), smoothing, channels);
    cfg.quantile = o.quantile;
    cfg.resolution = o.resolution;
    cfg.delta = (o.method == PwsMethod::OneFrame).then_some(o.delta);
    Ok((spec, cfg))
}

fn one_frame(cloud: &ColoredPointCloud, cam: &CameraModel, m: PwsMethod) -> Result<Option<ColoredPointCloud>, Failure> {
    if m != PwsMethod::OneFrame {
        return Ok(None);
    }
    Ok(Some(extract_one_frame(cloud, &capture_camera(cam, CAPTURE_FACTOR)?)?))
}

/// Partition spacing and frame count without certifying.
///
/// # Safety
/// Pointers must be valid; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn pws_partition(
    cloud: *const PwsCloud,
    cam: *const PwsCamera,
    options: *const PwsCertifyOptions,
    out_delta_alpha: *mut f64,
    out_n: *mut usize,
) -> PwsStatus {
    guard(|| {
        let cloud = &deref(cloud, "cloud")?.0;
        let cam = camera(deref(cam, "camera")?)?;
        let o = deref(options, "options")?;
        let (out_delta_alpha, out_n) = (out(out_delta_alpha, "out_delta_alpha")?, out(out_n, "out_n")?);
        let (spec, cfg) = certify_config(o, cloud.channels())?;
        let one = one_frame(cloud, &cam, o.method)?;
        let estimate = pws_core::certify::partition_delta(cloud, one.as_ref(), &spec, &cam, &cfg)?;
        *out_delta_alpha = estimate.delta_alpha;
        *out_n = pws_core::intervals::partition_count(estimate.delta_alpha, &spec)?;
        Ok(())
    })
}

/// Certifies `cloud` against motion along one axis.
///
/// # Safety
/// Pointers must be valid; `out_report` writable.
#[no_mangle]
pub unsafe extern "C" fn pws_certify(
    cloud: *const PwsCloud,
    model: *const PwsModel,
    cam: *const PwsCamera,
    options: *const PwsCertifyOptions,
    out_report: *mut *mut PwsReport,
) -> PwsStatus {
    guard(|| {
        let cloud = &deref(cloud, "cloud")?.0;
        let model = &deref(model, "model")?.0;
        let cam = camera(deref(cam, "camera")?)?;
        let o = deref(options, "options")?;
        let out_report = out(out_report, "out_report")?;
        let (spec, cfg) = certify_config(o, cloud.channels())?;
        let one = one_frame(cloud, &cam, o.method)?;
        *out_report = into_handle(PwsReport(certify(cloud, one.as_ref(), &spec, &cam, model, &cfg)?));
        Ok(())
    })
}

/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_report_verdict(report: *const PwsReport, out_verdict: *mut PwsVerdict) -> PwsStatus {
    guard(|| {
        let r = &deref(report, "report")?.0;
        *out(out_verdict, "out_verdict")? = match r.verdict {
            Verdict::Certified => PwsVerdict::Certified,
            Verdict::NotCertified => PwsVerdict::NotCertified,
            Verdict::Abstain => PwsVerdict::Abstain,
        };
        Ok(())
    })
}

/// Partition count, or 0 for null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_report_n(report: *const PwsReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.n)
}

/// Minimum radius minus maximum adjacent-frame error; NaN for null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pws_report_margin(report: *const PwsReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.margin)
}

/// Report as JSON without timing. Free the string with [`pws_string_free`].
///
/// # Safety
/// `report` must be a live handle; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn pws_report_json(report: *const PwsReport, out_json: *mut *mut c_char) -> PwsStatus {
    guard(|| {
        let r = &deref(report, "report")?.0;
        let out_json = out(out_json, "out_json")?;
        let text = r.deterministic_json()?;
        *out_json = CString::new(text).map_err(|_| PwsError::InvalidInput("report contains NUL".into()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `report` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn pws_report_free(report: *mut PwsReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Standard normal quantile.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pws_gaussian_quantile(p: f64, out_value: *mut f64) -> PwsStatus {
    guard(|| {
        *out(out_value, "out_value")? = gaussian_quantile(p)?;
        Ok(())
    })
}

/// One-sided Clopper–Pearson lower bound for `successes` out of `trials`; NaN when
/// the arguments are out of range.
#[no_mangle]
pub extern "C" fn pws_clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> f64 {
    if successes > trials || !(alpha > 0.0 && alpha < 1.0) {
        return f64::NAN;
    }
    catch_unwind(|| clopper_pearson_lower(successes, trials, alpha)).unwrap_or(f64::NAN)
}
