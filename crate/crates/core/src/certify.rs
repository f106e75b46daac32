//! End-to-end certification: spacing, partition frames, per-frame smoothing and
//! the verdict, plus the empirical attack and the reporting metrics.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::BaseClassifier;
use crate::error::{PwsError, Result};
use crate::geometry::{CameraModel, MotionSpec};
use crate::intervals::{
    build_partition, exact_from_sweep, lipschitz_from_sweep, one_frame_from_sweep, DeltaConvexity, DeltaEstimate, Method,
    Sweep, DEFAULT_QUANTILE, DEFAULT_RESOLUTION,
};
use crate::rasterizer::{adjacent_frame_error, default_background, render_sweep, ColoredPointCloud};
use crate::scenes::extract_one_frame;
use crate::smoothing::{argmax_u64, smoothed_estimate, SmoothingConfig};

pub const REPORT_VERSION: u32 = 1;
/// Frame budget of the motion-space smoothing baseline.
pub const DEFAULT_BASELINE_SAMPLES: u64 = 10_000;
/// Frames rendered and smoothed together; bounds peak memory for large partitions.
const FRAME_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Certified,
    NotCertified,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub method: Method,
    pub resolution: usize,
    pub quantile: f64,
    /// δ-convexity prior in pixels; one-frame method only.
    pub delta: Option<f64>,
    pub smoothing: SmoothingConfig,
    pub background: Vec<f32>,
}

impl CertifyConfig {
    pub fn new(method: Method, smoothing: SmoothingConfig, channels: usize) -> Self {
        CertifyConfig {
            method,
            resolution: DEFAULT_RESOLUTION,
            quantile: DEFAULT_QUANTILE,
            delta: None,
            smoothing,
            background: default_background(channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        if self.method == Method::OneFrame && self.delta.is_none() {
            return Err(PwsError::InvalidInput("the one-frame method needs a delta".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEstimate {
    pub alpha: f64,
    pub y_a: usize,
    pub pa_lower: f64,
    pub pb_upper: f64,
    pub radius: f64,
    pub abstained: bool,
}

/// Wall-clock data, kept apart so reports can be compared byte for byte without it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub pws_report_version: u32,
    pub verdict: Verdict,
    pub method: Method,
    pub spec: MotionSpec,
    pub sigma: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub delta_alpha: f64,
    pub max_adjacent_error: f64,
    pub min_radius: f64,
    pub margin: f64,
    pub per_partition: Vec<PartitionEstimate>,
    pub frames_rendered: usize,
    pub quantile: f64,
    pub seed: u64,
    pub values_sha256: String,
    pub delta_estimate: DeltaEstimate,
    /// Union bound over the per-partition confidence levels.
    pub failure_bound: f64,
    pub noise_clamped: bool,
    pub config: CertifyConfig,
    pub classifier: serde_json::Value,
    pub timing: Timing,
}

impl CertificationReport {
    /// Top label shared by all partitions, when there is one.
    pub fn predicted_label(&self) -> Option<usize> {
        let first = self.per_partition.first()?.y_a;
        self.per_partition.iter().all(|p| p.y_a == first).then_some(first)
    }

    /// Serialized report without the timing field.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        value.as_object_mut().unwrap().remove("timing");
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Strict comparison, no slack: equality is not certified.
pub fn decide_verdict(partitions: &[PartitionEstimate], max_adjacent_error: f64, min_radius: f64) -> Verdict {
    let Some(first) = partitions.first() else { return Verdict::Abstain };
    if partitions.iter().any(|p| p.abstained || p.y_a != first.y_a) {
        Verdict::Abstain
    } else if max_adjacent_error < min_radius {
        Verdict::Certified
    } else {
        Verdict::NotCertified
    }
}

/// Partition spacing for the configured method. The one-frame method uses `one_frame`
/// when given and otherwise extracts it from `cloud` at the reference pose.
pub fn partition_delta(
    cloud: &ColoredPointCloud,
    one_frame: Option<&ColoredPointCloud>,
    spec: &MotionSpec,
    cam: &CameraModel,
    cfg: &CertifyConfig,
) -> Result<DeltaEstimate> {
    cfg.validate()?;
    match cfg.method {
        Method::Exact => exact_from_sweep(&Sweep::compute(cloud.points(), spec, cam, cfg.resolution)?, cfg.quantile),
        Method::Lipschitz => lipschitz_from_sweep(
            &Sweep::compute(cloud.points(), spec, cam, cfg.resolution)?,
            cloud.points(),
            cfg.quantile,
        ),
        Method::OneFrame => {
            let extracted;
            let one = match one_frame {
                Some(one) => one,
                None => {
                    extracted = extract_one_frame(cloud, cam)?;
                    &extracted
                }
            };
            let delta = DeltaConvexity::new(cfg.delta.unwrap())?;
            let sweep = Sweep::compute(one.points(), spec, cam, cfg.resolution)?;
            one_frame_from_sweep(&sweep, one, delta, cfg.quantile)
        }
    }
}

fn check_classifier(classifier: &dyn BaseClassifier, cloud: &ColoredPointCloud, cam: &CameraModel) -> Result<()> {
    let expected = (cloud.channels(), cam.height, cam.width);
    if classifier.input_shape() != expected {
        return Err(PwsError::shape(format!("{expected:?}"), format!("{:?}", classifier.input_shape())));
    }
    Ok(())
}

/// Certifies `cloud` over `spec`. Partition frames are always rendered from `cloud`;
/// `one_frame` only feeds the spacing of the one-frame method.
pub fn certify(
    cloud: &ColoredPointCloud,
    one_frame: Option<&ColoredPointCloud>,
    spec: &MotionSpec,
    cam: &CameraModel,
    classifier: &dyn BaseClassifier,
    cfg: &CertifyConfig,
) -> Result<CertificationReport> {
    let start = Instant::now();
    check_classifier(classifier, cloud, cam)?;
    let estimate = partition_delta(cloud, one_frame, spec, cam, cfg)?;
    let plan = build_partition(estimate.delta_alpha, spec, cfg.method, cfg.quantile)?;

    let mut per_partition = Vec::with_capacity(plan.n());
    let mut max_adjacent_error: f64 = 0.0;
    let mut previous = None;
    for (c, values) in plan.values.chunks(FRAME_CHUNK).enumerate() {
        let mut frames = render_sweep(cloud, spec, cam, values, &cfg.background)?;
        let offset = c * FRAME_CHUNK;
        let estimates: Vec<PartitionEstimate> = frames
            .par_iter()
            .enumerate()
            .map(|(j, frame)| {
                let i = offset + j;
                let e = smoothed_estimate(classifier, frame, &cfg.smoothing.derive(i as u64))?;
                Ok(PartitionEstimate {
                    alpha: plan.values[i],
                    y_a: e.top_label,
                    pa_lower: e.pa_lower,
                    pb_upper: e.pb_upper,
                    radius: e.radius,
                    abstained: e.abstained(),
                })
            })
            .collect::<Result<_>>()?;
        per_partition.extend(estimates);
        if let (Some(prev), Some(first)) = (&previous, frames.first()) {
            max_adjacent_error = max_adjacent_error.max(adjacent_frame_error(prev, first)?);
        }
        for pair in frames.windows(2) {
            max_adjacent_error = max_adjacent_error.max(adjacent_frame_error(&pair[0], &pair[1])?);
        }
        previous = frames.pop();
    }

    let min_radius = per_partition.iter().map(|p| p.radius).fold(f64::INFINITY, f64::min);
    let verdict = decide_verdict(&per_partition, max_adjacent_error, min_radius);
    Ok(CertificationReport {
        pws_report_version: REPORT_VERSION,
        verdict,
        method: cfg.method,
        spec: *spec,
        sigma: cfg.smoothing.sigma,
        n: plan.n(),
        delta_alpha: estimate.delta_alpha,
        max_adjacent_error,
        min_radius,
        margin: min_radius - max_adjacent_error,
        frames_rendered: plan.n(),
        quantile: cfg.quantile,
        seed: cfg.smoothing.seed,
        values_sha256: plan.values_digest(),
        delta_estimate: estimate,
        failure_bound: (plan.n() as f64 * cfg.smoothing.confidence_alpha).min(1.0),
        noise_clamped: false,
        config: cfg.clone(),
        classifier: classifier.describe(),
        per_partition,
        timing: Timing { wall_time_s: start.elapsed().as_secs_f64() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub pws_report_version: u32,
    pub spec: MotionSpec,
    pub sigma: f64,
    pub n_samples: u64,
    pub seed: u64,
    pub poses_tested: usize,
    pub reference_label: usize,
    pub first_failure_pose: Option<f64>,
    pub first_failure_label: Option<usize>,
    pub empirically_robust: bool,
}

fn smoothed_label(classifier: &dyn BaseClassifier, frame: &crate::Image, cfg: &SmoothingConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(argmax_u64(&classifier.noisy_label_counts(frame, cfg.sigma, cfg.n_samples, cfg.seed)?))
}

/// Evaluates the smoothed prediction at `poses` uniformly spaced motion values and
/// reports the first whose label differs from the one at zero motion.
pub fn empirical_attack(
    cloud: &ColoredPointCloud,
    spec: &MotionSpec,
    cam: &CameraModel,
    classifier: &dyn BaseClassifier,
    smoothing: &SmoothingConfig,
    background: &[f32],
    poses: usize,
) -> Result<AttackReport> {
    if poses == 0 {
        return Err(PwsError::InvalidInput("an attack needs at least one pose".into()));
    }
    check_classifier(classifier, cloud, cam)?;
    let reference_cfg = smoothing.derive(u64::MAX);
    let reference = render_sweep(cloud, spec, cam, &[0.0], background)?.remove(0);
    let reference_label = smoothed_label(classifier, &reference, &reference_cfg)?;
    let values = spec.uniform_values(poses);
    let mut failure = None;
    for (c, chunk) in values.chunks(FRAME_CHUNK).enumerate() {
        let frames = render_sweep(cloud, spec, cam, chunk, background)?;
        let labels: Vec<usize> = frames
            .par_iter()
            .enumerate()
            .map(|(j, frame)| {
                let i = c * FRAME_CHUNK + j;
                if values[i] == 0.0 {
                    Ok(reference_label)
                } else {
                    smoothed_label(classifier, frame, &smoothing.derive(i as u64))
                }
            })
            .collect::<Result<_>>()?;
        if let Some(j) = labels.iter().position(|&l| l != reference_label) {
            failure = Some((chunk[j], labels[j]));
            break;
        }
    }
    Ok(AttackReport {
        pws_report_version: REPORT_VERSION,
        spec: *spec,
        sigma: smoothing.sigma,
        n_samples: smoothing.n_samples,
        seed: smoothing.seed,
        poses_tested: poses,
        reference_label,
        first_failure_pose: failure.map(|f| f.0),
        first_failure_label: failure.map(|f| f.1),
        empirically_robust: failure.is_none(),
    })
}

/// Partition frames as a fraction of the baseline's Monte Carlo frames.
pub fn frame_budget_comparison(report: &CertificationReport, baseline_mc_samples: u64) -> Result<f64> {
    if baseline_mc_samples == 0 {
        return Err(PwsError::InvalidInput("baseline sample count must be positive".into()));
    }
    Ok(report.n as f64 / baseline_mc_samples as f64)
}

/// Outcome of one corpus sample, including samples whose pipeline failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub name: String,
    pub label: usize,
    pub verdict: Option<Verdict>,
    pub predicted: Option<usize>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub max_adjacent_error: Option<f64>,
    pub min_radius: Option<f64>,
    pub error: Option<String>,
}

impl SampleOutcome {
    pub fn from_report(name: &str, label: usize, report: &CertificationReport) -> Self {
        SampleOutcome {
            name: name.to_string(),
            label,
            verdict: Some(report.verdict),
            predicted: report.predicted_label(),
            n: Some(report.n),
            max_adjacent_error: Some(report.max_adjacent_error),
            min_radius: Some(report.min_radius),
            error: None,
        }
    }

    pub fn from_error(name: &str, label: usize, err: &PwsError) -> Self {
        SampleOutcome {
            name: name.to_string(),
            label,
            verdict: None,
            predicted: None,
            n: None,
            max_adjacent_error: None,
            min_radius: None,
            error: Some(format!("{}: {err}", err.kind())),
        }
    }

    pub fn certified_correct(&self) -> bool {
        self.verdict == Some(Verdict::Certified) && self.predicted == Some(self.label)
    }
}

/// Fraction of samples that are certified with the ground-truth label.
pub fn certified_accuracy(samples: &[SampleOutcome]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PwsError::InvalidInput("certified accuracy of an empty corpus".into()));
    }
    Ok(samples.iter().filter(|s| s.certified_correct()).count() as f64 / samples.len() as f64)
}
