//! Consistent motion intervals and the partition spacing bounds derived from them.
//!
//! The motion set is swept at a fixed number of uniformly spaced poses. For each
//! pixel the sequence of z-buffer winners is cut into maximal runs; a run is the
//! discretized consistent interval of its owner at that pixel. Runs that touch
//! either end of the motion set are clipped by `S` itself and never force a
//! partition boundary, so only interior runs constrain the spacing.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PwsError, Result};
use crate::geometry::{delta_constant, lipschitz_constant, CameraModel, MotionSpec, Point3, Pose};
use crate::rasterizer::{owner_map, pixel_index, ColoredPointCloud, NO_OWNER};

pub const DEFAULT_QUANTILE: f64 = 0.995;
pub const DEFAULT_RESOLUTION: usize = 4001;

/// Hard cap on partition counts; anything above is a configuration error.
pub const MAX_PARTITIONS: usize = 50_000_000;

/// Upper bound on owner-map bytes held at once during a sweep.
const SWEEP_CHUNK_BYTES: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Lipschitz,
    OneFrame,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Exact, Method::Lipschitz, Method::OneFrame];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Lipschitz => "lipschitz",
            Method::OneFrame => "one-frame",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = PwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "lipschitz" => Ok(Method::Lipschitz),
            "one-frame" | "oneframe" | "one_frame" => Ok(Method::OneFrame),
            other => Err(PwsError::InvalidInput(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistentInterval {
    pub point_index: usize,
    pub pixel: Pixel,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaConvexity {
    delta: f64,
}

impl DeltaConvexity {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(PwsError::InvalidInput(format!("delta must be positive, got {delta}")));
        }
        Ok(DeltaConvexity { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Run {
    owner: u32,
    first: u32,
    last: u32,
}

/// Per-pixel owner runs of a uniform sweep over the motion set.
#[derive(Debug, Clone)]
pub struct Sweep {
    spec: MotionSpec,
    cam: CameraModel,
    values: Vec<f64>,
    runs: Vec<Vec<Run>>,
}

impl Sweep {
    pub fn compute(points: &[Point3], spec: &MotionSpec, cam: &CameraModel, resolution: usize) -> Result<Sweep> {
        if resolution < 2 {
            return Err(PwsError::InvalidInput(format!("analysis resolution must be at least 2, got {resolution}")));
        }
        if resolution > u32::MAX as usize {
            return Err(PwsError::InvalidInput("analysis resolution too large".into()));
        }
        let values = spec.uniform_values(resolution);
        let pixels = cam.pixel_count();
        let chunk = (SWEEP_CHUNK_BYTES / (4 * pixels)).clamp(1, 512);
        let mut runs: Vec<Vec<Run>> = vec![Vec::new(); pixels];
        let mut open: Vec<Run> = vec![Run { owner: NO_OWNER, first: 0, last: 0 }; pixels];
        for start in (0..resolution).step_by(chunk) {
            let end = (start + chunk).min(resolution);
            let maps: Vec<Vec<u32>> = values[start..end]
                .par_iter()
                .map(|&a| owner_map(points, &Pose::new(spec.axis, a), cam))
                .collect();
            runs.par_iter_mut().zip(open.par_iter_mut()).enumerate().for_each(|(ix, (closed, cur))| {
                for (offset, map) in maps.iter().enumerate() {
                    let j = (start + offset) as u32;
                    let owner = map[ix];
                    if j == 0 {
                        *cur = Run { owner, first: 0, last: 0 };
                    } else if owner == cur.owner {
                        cur.last = j;
                    } else {
                        closed.push(*cur);
                        *cur = Run { owner, first: j, last: j };
                    }
                }
            });
        }
        for (closed, cur) in runs.iter_mut().zip(open) {
            closed.push(cur);
        }
        Ok(Sweep { spec: *spec, cam: *cam, values, runs })
    }

    pub fn spec(&self) -> &MotionSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.values.len()
    }

    /// Spacing between consecutive sweep poses.
    pub fn step(&self) -> f64 {
        2.0 * self.spec.radius / (self.values.len() - 1) as f64
    }

    fn is_interior(&self, run: &Run) -> bool {
        run.first > 0 && (run.last as usize) + 1 < self.values.len()
    }

    fn width(&self, run: &Run) -> f64 {
        (run.last - run.first) as f64 * self.step()
    }

    fn covered(&self, ix: usize) -> bool {
        self.runs[ix].iter().any(|r| r.owner != NO_OWNER)
    }

    pub fn intervals(&self) -> Vec<ConsistentInterval> {
        let w = self.cam.width;
        self.runs
            .iter()
            .enumerate()
            .flat_map(|(ix, runs)| {
                runs.iter().filter(|r| r.owner != NO_OWNER).map(move |r| ConsistentInterval {
                    point_index: r.owner as usize,
                    pixel: Pixel { row: ix / w, col: ix % w },
                    lo: self.values[r.first as usize],
                    hi: self.values[r.last as usize],
                })
            })
            .collect()
    }

    /// Owner at every sweep pose for one pixel, [`NO_OWNER`] for background.
    pub fn pixel_owners(&self, pixel: Pixel) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.values.len());
        for r in &self.runs[pixel.row * self.cam.width + pixel.col] {
            out.extend(std::iter::repeat_n(r.owner, (r.last - r.first + 1) as usize));
        }
        out
    }

    fn owners_needing_constants(&self) -> Vec<bool> {
        let mut needed = Vec::new();
        for runs in &self.runs {
            for r in runs.iter().filter(|r| r.owner != NO_OWNER && self.is_interior(r)) {
                let o = r.owner as usize;
                if needed.len() <= o {
                    needed.resize(o + 1, false);
                }
                needed[o] = true;
            }
        }
        needed
    }

    fn lipschitz_table(&self, points: &[Point3]) -> Result<Vec<f64>> {
        let needed = self.owners_needing_constants();
        (0..needed.len())
            .into_par_iter()
            .map(|i| if needed[i] { lipschitz_constant(&points[i], &self.spec, &self.cam) } else { Ok(f64::NAN) })
            .collect()
    }

    fn span(&self, p: &Point3, run: &Run) -> f64 {
        let axis = self.spec.axis;
        let (a, _) = Pose::new(axis, self.values[run.first as usize]).project_unchecked(p, &self.cam);
        let (b, _) = Pose::new(axis, self.values[run.last as usize]).project_unchecked(p, &self.cam);
        a.linf_distance(&b)
    }

    /// Checks that the distance from the run's first position grows along the run.
    fn is_monotone(&self, p: &Point3, run: &Run) -> bool {
        const PROBES: u32 = 6;
        let axis = self.spec.axis;
        let (lo, hi) = (self.values[run.first as usize], self.values[run.last as usize]);
        let (start, _) = Pose::new(axis, lo).project_unchecked(p, &self.cam);
        let mut prev = 0.0;
        for k in 1..=PROBES {
            let a = lo + (hi - lo) * k as f64 / PROBES as f64;
            let (pos, _) = Pose::new(axis, a).project_unchecked(p, &self.cam);
            let d = start.linf_distance(&pos);
            if d + 1e-12 < prev {
                return false;
            }
            prev = d;
        }
        true
    }
}

/// Result of a spacing computation with the bookkeeping behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub delta_alpha: f64,
    /// Per-pixel quantile value before the one-step shrink; `None` when no pixel constrains the spacing.
    pub quantile_value: Option<f64>,
    pub constrained_pixels: usize,
    pub grid_step: f64,
    pub monotonicity_violations: usize,
}

fn validate_quantile(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PwsError::InvalidInput(format!("quantile must lie in (0, 1], got {q}")));
    }
    Ok(())
}

/// Lower quantile: the largest value that at least a fraction `q` of entries meet or exceed.
fn lower_quantile(mut values: Vec<f64>, q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let drop = (((1.0 - q) * n as f64) + 1e-9).floor() as usize;
    Some(values[drop.min(n - 1)])
}

fn finish(sweep: &Sweep, per_pixel: Vec<f64>, quantile: f64, violations: usize) -> Result<DeltaEstimate> {
    let step = sweep.step();
    let constrained = per_pixel.len();
    let q = lower_quantile(per_pixel, quantile);
    let delta_alpha = match q {
        None => 2.0 * sweep.spec.radius,
        Some(v) => {
            let d = (v - step).min(2.0 * sweep.spec.radius);
            if !(d > step) {
                return Err(PwsError::DegenerateInterval { delta: d, step });
            }
            d
        }
    };
    Ok(DeltaEstimate {
        delta_alpha,
        quantile_value: q,
        constrained_pixels: constrained,
        grid_step: step,
        monotonicity_violations: violations,
    })
}

fn warn_monotonicity(violations: usize) {
    if violations > 0 {
        log::warn!("{violations} governing runs are not monotone in the l-infinity norm; Lipschitz bounds may be loose");
    }
}

pub fn consistent_intervals(
    cloud: &ColoredPointCloud,
    spec: &MotionSpec,
    cam: &CameraModel,
    resolution: usize,
) -> Result<Vec<ConsistentInterval>> {
    Ok(Sweep::compute(cloud.points(), spec, cam, resolution)?.intervals())
}

pub fn exact_from_sweep(sweep: &Sweep, quantile: f64) -> Result<DeltaEstimate> {
    validate_quantile(quantile)?;
    let per_pixel: Vec<f64> = (0..sweep.runs.len())
        .into_par_iter()
        .filter(|&ix| sweep.covered(ix))
        .filter_map(|ix| {
            sweep.runs[ix]
                .iter()
                .filter(|r| sweep.is_interior(r))
                .map(|r| sweep.width(r))
                .min_by(f64::total_cmp)
        })
        .collect();
    finish(sweep, per_pixel, quantile, 0)
}

pub fn lipschitz_from_sweep(sweep: &Sweep, points: &[Point3], quantile: f64) -> Result<DeltaEstimate> {
    validate_quantile(quantile)?;
    let lip = sweep.lipschitz_table(points)?;
    let results: Vec<(f64, usize)> = (0..sweep.runs.len())
        .into_par_iter()
        .filter(|&ix| sweep.covered(ix))
        .filter_map(|ix| {
            let mut best: Option<f64> = None;
            let mut violations = 0;
            for r in sweep.runs[ix].iter().filter(|r| sweep.is_interior(r)) {
                let value = if r.owner == NO_OWNER {
                    sweep.width(r)
                } else {
                    let p = &points[r.owner as usize];
                    if !sweep.is_monotone(p, r) {
                        violations += 1;
                    }
                    // span <= L * width always; the cap only absorbs rounding when they are equal.
                    (sweep.span(p, r) / lip[r.owner as usize]).min(sweep.width(r))
                };
                best = Some(best.map_or(value, |b| b.min(value)));
            }
            best.map(|b| (b, violations))
        })
        .collect();
    let violations = results.iter().map(|r| r.1).sum();
    warn_monotonicity(violations);
    finish(sweep, results.into_iter().map(|r| r.0).collect(), quantile, violations)
}

/// Spacing from a sweep of the one-frame cloud. Background runs are ignored: the
/// one-frame cloud says nothing about what fills its holes.
pub fn one_frame_from_sweep(
    sweep: &Sweep,
    one_frame: &ColoredPointCloud,
    delta: DeltaConvexity,
    quantile: f64,
) -> Result<DeltaEstimate> {
    validate_quantile(quantile)?;
    let points = one_frame.points();
    let lip = sweep.lipschitz_table(points)?;
    let c_delta = delta_constant(&sweep.spec, &sweep.cam, one_frame, delta.delta())?;
    let two_delta = 2.0 * delta.delta();
    let results: Vec<(f64, usize)> = (0..sweep.runs.len())
        .into_par_iter()
        .filter_map(|ix| {
            let mut rate = f64::INFINITY;
            let mut margin = f64::INFINITY;
            let mut violations = 0;
            for r in sweep.runs[ix].iter().filter(|r| r.owner != NO_OWNER && sweep.is_interior(r)) {
                let p = &points[r.owner as usize];
                if !sweep.is_monotone(p, r) {
                    violations += 1;
                }
                rate = rate.min(1.0 / (lip[r.owner as usize] + c_delta));
                margin = margin.min(sweep.span(p, r) - two_delta);
            }
            margin.is_finite().then(|| (if margin > 0.0 { rate * margin } else { margin }, violations))
        })
        .collect();
    let violations = results.iter().map(|r| r.1).sum();
    warn_monotonicity(violations);
    let per_pixel: Vec<f64> = results.into_iter().map(|r| r.0).collect();
    if let Some(v) = lower_quantile(per_pixel.clone(), quantile) {
        if v <= 0.0 {
            return Err(PwsError::NegativeMargin { margin: v });
        }
    }
    finish(sweep, per_pixel, quantile, violations)
}

pub fn exact_delta(
    cloud: &ColoredPointCloud,
    spec: &MotionSpec,
    cam: &CameraModel,
    resolution: usize,
    quantile: f64,
) -> Result<f64> {
    validate_quantile(quantile)?;
    let sweep = Sweep::compute(cloud.points(), spec, cam, resolution)?;
    Ok(exact_from_sweep(&sweep, quantile)?.delta_alpha)
}

pub fn lipschitz_delta(
    cloud: &ColoredPointCloud,
    spec: &MotionSpec,
    cam: &CameraModel,
    resolution: usize,
    quantile: f64,
) -> Result<f64> {
    validate_quantile(quantile)?;
    let sweep = Sweep::compute(cloud.points(), spec, cam, resolution)?;
    Ok(lipschitz_from_sweep(&sweep, cloud.points(), quantile)?.delta_alpha)
}

pub fn one_frame_delta(
    one_frame: &ColoredPointCloud,
    spec: &MotionSpec,
    cam: &CameraModel,
    resolution: usize,
    delta: DeltaConvexity,
    quantile: f64,
) -> Result<f64> {
    validate_quantile(quantile)?;
    let sweep = Sweep::compute(one_frame.points(), spec, cam, resolution)?;
    Ok(one_frame_from_sweep(&sweep, one_frame, delta, quantile)?.delta_alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityViolation {
    pub point_index: usize,
    pub value: f64,
}

fn point_key(p: &Point3) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

/// Indices of `full` points that are absent from `one_frame`.
fn hidden_indices(full: &ColoredPointCloud, one_frame: &ColoredPointCloud) -> Vec<usize> {
    let keys: HashSet<[u64; 3]> = one_frame.points().iter().map(point_key).collect();
    (0..full.len()).filter(|&i| !keys.contains(&point_key(&full.points()[i]))).collect()
}

/// One-frame positions bucketed on a square grid for neighbourhood queries.
struct PositionIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<(f64, f64, f64)>>,
}

impl PositionIndex {
    fn build(points: &[Point3], pose: &Pose, cam: &CameraModel, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<(f64, f64, f64)>> = HashMap::new();
        for p in points {
            let (pos, depth) = pose.project_unchecked(p, cam);
            if depth > 0.0 && pos.u.is_finite() && pos.v.is_finite() {
                let key = ((pos.u / cell).floor() as i64, (pos.v / cell).floor() as i64);
                buckets.entry(key).or_default().push((pos.u, pos.v, depth));
            }
        }
        PositionIndex { cell, buckets }
    }

    /// Smallest l∞ distance to an entry no deeper than `depth`, searched out to `limit`.
    fn nearest_in_front(&self, u: f64, v: f64, depth: f64, limit: f64) -> Option<f64> {
        let (cu, cv) = ((u / self.cell).floor() as i64, (v / self.cell).floor() as i64);
        let rings = (limit / self.cell).ceil() as i64 + 1;
        let mut best: Option<f64> = None;
        for ring in 0..=rings {
            // Entries in ring k are at least (k - 1) cells away.
            if let Some(b) = best {
                if (ring - 1) as f64 * self.cell > b {
                    break;
                }
            }
            for du in -ring..=ring {
                for dv in -ring..=ring {
                    if du.abs().max(dv.abs()) != ring {
                        continue;
                    }
                    let Some(bucket) = self.buckets.get(&(cu + du, cv + dv)) else { continue };
                    for &(pu, pv, pd) in bucket {
                        if pd <= depth {
                            let d = (pu - u).abs().max((pv - v).abs());
                            if d <= limit && best.is_none_or(|b| d < b) {
                                best = Some(d);
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Hidden points that matter at a pose: in front of the camera and on the grid.
fn visible_hidden(full: &ColoredPointCloud, hidden: &[usize], pose: &Pose, cam: &CameraModel) -> Vec<(usize, f64, f64, f64)> {
    hidden
        .iter()
        .filter_map(|&i| {
            let (pos, depth) = pose.project_unchecked(&full.points()[i], cam);
            (depth > 0.0 && pixel_index(pos.u, pos.v, cam).is_some()).then_some((i, pos.u, pos.v, depth))
        })
        .collect()
}

fn convexity_poses(spec: &MotionSpec, samples: usize) -> Vec<f64> {
    spec.uniform_values(samples.max(1))
}

/// First hidden point (in pose order, then index order) with no one-frame point
/// within `delta` pixels that is at least as near to the camera.
pub fn find_delta_convexity_violation(
    full: &ColoredPointCloud,
    one_frame: &ColoredPointCloud,
    delta: f64,
    spec: &MotionSpec,
    cam: &CameraModel,
    samples: usize,
) -> Option<ConvexityViolation> {
    let hidden = hidden_indices(full, one_frame);
    if hidden.is_empty() {
        return None;
    }
    let cell = delta.max(0.25);
    for a in convexity_poses(spec, samples) {
        let pose = Pose::new(spec.axis, a);
        let index = PositionIndex::build(one_frame.points(), &pose, cam, cell);
        let found = visible_hidden(full, &hidden, &pose, cam)
            .into_par_iter()
            .find_first(|&(_, u, v, d)| index.nearest_in_front(u, v, d, delta).is_none());
        if let Some((i, ..)) = found {
            return Some(ConvexityViolation { point_index: i, value: a });
        }
    }
    None
}

pub fn check_delta_convexity(
    full: &ColoredPointCloud,
    one_frame: &ColoredPointCloud,
    delta: f64,
    spec: &MotionSpec,
    cam: &CameraModel,
    samples: usize,
) -> bool {
    find_delta_convexity_violation(full, one_frame, delta, spec, cam, samples).is_none()
}

/// Smallest δ for which the sampled convexity check passes, if one exists below `limit`.
pub fn minimal_convexity_delta(
    full: &ColoredPointCloud,
    one_frame: &ColoredPointCloud,
    spec: &MotionSpec,
    cam: &CameraModel,
    samples: usize,
    limit: f64,
) -> Option<f64> {
    let hidden = hidden_indices(full, one_frame);
    let mut worst: f64 = 0.0;
    for a in convexity_poses(spec, samples) {
        let pose = Pose::new(spec.axis, a);
        let index = PositionIndex::build(one_frame.points(), &pose, cam, 1.0);
        let per_point: Option<Vec<f64>> = visible_hidden(full, &hidden, &pose, cam)
            .into_par_iter()
            .map(|(_, u, v, d)| index.nearest_in_front(u, v, d, limit))
            .collect();
        worst = per_point?.into_iter().fold(worst, f64::max);
    }
    Some(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub spec: MotionSpec,
    pub delta_alpha: f64,
    pub values: Vec<f64>,
    pub method: Method,
    pub quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub axis: crate::geometry::Axis,
    pub b: f64,
    pub delta_alpha: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub method: Method,
    pub quantile: f64,
    pub values_sha256: String,
}

impl PartitionPlan {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.spec.radius / (self.values.len() - 1) as f64
    }

    pub fn values_digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn summary(&self) -> PartitionSummary {
        PartitionSummary {
            axis: self.spec.axis,
            b: self.spec.radius,
            delta_alpha: self.delta_alpha,
            n: self.n(),
            method: self.method,
            quantile: self.quantile,
            values_sha256: self.values_digest(),
        }
    }
}

pub fn partition_count(delta_alpha: f64, spec: &MotionSpec) -> Result<usize> {
    let width = 2.0 * spec.radius;
    if !(delta_alpha > 0.0 && delta_alpha <= width) {
        return Err(PwsError::InvalidDelta(delta_alpha));
    }
    let ratio = (width / delta_alpha).ceil();
    if !(ratio < MAX_PARTITIONS as f64) {
        return Err(PwsError::InvalidDelta(delta_alpha));
    }
    let mut n = ratio as usize + 1;
    // Guard against the ratio rounding down.
    while width / (n - 1) as f64 > delta_alpha {
        n += 1;
    }
    Ok(n)
}

pub fn build_partition(delta_alpha: f64, spec: &MotionSpec, method: Method, quantile: f64) -> Result<PartitionPlan> {
    validate_quantile(quantile)?;
    let n = partition_count(delta_alpha, spec)?;
    Ok(PartitionPlan {
        spec: *spec,
        delta_alpha,
        values: spec.uniform_values(n),
        method,
        quantile,
    })
}
