//! Pinhole projection under one-axis camera motion.
//!
//! A motion value `a` on axis `A` moves the camera; a world point `P` is seen at
//! camera coordinates `R⁻¹(P − t)` where exactly one of the six motion
//! coordinates is `a`. All closed forms below are written in those camera
//! coordinates, so `u = fx·x/z + cx`, `v = fy·y/z + cy` and the depth is `z`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};
use crate::rasterizer::ColoredPointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraModel { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(PwsError::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(PwsError::InvalidInput("camera grid must be non-empty".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(PwsError::InvalidInput(format!(
                "principal point ({}, {}) outside the {}x{} grid",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
}

impl Axis {
    pub const ALL: [Axis; 6] = [Axis::Tx, Axis::Ty, Axis::Tz, Axis::Rx, Axis::Ry, Axis::Rz];

    pub fn is_rotation(self) -> bool {
        matches!(self, Axis::Rx | Axis::Ry | Axis::Rz)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Tx => "tx",
            Axis::Ty => "ty",
            Axis::Tz => "tz",
            Axis::Rx => "rx",
            Axis::Ry => "ry",
            Axis::Rz => "rz",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = PwsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tx" => Ok(Axis::Tx),
            "ty" => Ok(Axis::Ty),
            "tz" => Ok(Axis::Tz),
            "rx" => Ok(Axis::Rx),
            "ry" => Ok(Axis::Ry),
            "rz" => Ok(Axis::Rz),
            other => Err(PwsError::InvalidInput(format!("unknown axis '{other}'"))),
        }
    }
}

/// Motion set `S = [-radius, radius]` along one axis. Radius is in meters for
/// translations and radians for rotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub axis: Axis,
    pub radius: f64,
}

impl MotionSpec {
    pub fn new(axis: Axis, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(PwsError::InvalidInput(format!("motion radius must be positive, got {radius}")));
        }
        // Rotations past a quarter turn cannot keep any point in front of the camera.
        if axis.is_rotation() && radius >= std::f64::consts::FRAC_PI_2 {
            return Err(PwsError::InvalidInput(format!("rotation radius {radius} rad must be below pi/2")));
        }
        Ok(MotionSpec { axis, radius })
    }

    pub fn lo(&self) -> f64 {
        -self.radius
    }

    pub fn hi(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, value: f64) -> bool {
        value.abs() <= self.radius
    }

    pub fn value(&self, value: f64) -> Result<MotionValue> {
        MotionValue::new(*self, value)
    }

    /// `count` uniformly spaced values from `-radius` to `radius` inclusive.
    pub fn uniform_values(&self, count: usize) -> Vec<f64> {
        match count {
            0 => Vec::new(),
            1 => vec![0.0],
            _ => {
                let step = 2.0 * self.radius / (count - 1) as f64;
                (0..count)
                    .map(|i| if i == count - 1 { self.radius } else { -self.radius + i as f64 * step })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionValue {
    pub spec: MotionSpec,
    pub value: f64,
}

impl MotionValue {
    pub fn new(spec: MotionSpec, value: f64) -> Result<Self> {
        if !spec.contains(value) {
            return Err(PwsError::InvalidRange(format!(
                "motion value {value} outside [-{r}, {r}]",
                r = spec.radius
            )));
        }
        Ok(MotionValue { spec, value })
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.spec.axis, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPosition {
    pub u: f64,
    pub v: f64,
}

impl PixelPosition {
    pub fn linf_distance(&self, other: &PixelPosition) -> f64 {
        (self.u - other.u).abs().max((self.v - other.v).abs())
    }
}

/// A single motion value with its trig terms precomputed, for hot loops.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    pub axis: Axis,
    pub value: f64,
    cos: f64,
    sin: f64,
}

impl Pose {
    pub fn new(axis: Axis, value: f64) -> Self {
        let (sin, cos) = if axis.is_rotation() { value.sin_cos() } else { (0.0, 1.0) };
        Pose { axis, value, cos, sin }
    }

    /// Camera-frame coordinates `R⁻¹(P − t)` of a world point.
    #[inline]
    pub fn camera_coords(&self, p: &Point3) -> [f64; 3] {
        let (c, s, a) = (self.cos, self.sin, self.value);
        match self.axis {
            Axis::Tx => [p.x - a, p.y, p.z],
            Axis::Ty => [p.x, p.y - a, p.z],
            Axis::Tz => [p.x, p.y, p.z - a],
            Axis::Rx => [p.x, c * p.y + s * p.z, -s * p.y + c * p.z],
            Axis::Ry => [c * p.x - s * p.z, p.y, s * p.x + c * p.z],
            Axis::Rz => [c * p.x + s * p.y, -s * p.x + c * p.y, p.z],
        }
    }

    /// Derivative of [`Pose::camera_coords`] with respect to the motion value.
    #[inline]
    fn camera_coords_rate(&self, q: &[f64; 3]) -> [f64; 3] {
        match self.axis {
            Axis::Tx => [-1.0, 0.0, 0.0],
            Axis::Ty => [0.0, -1.0, 0.0],
            Axis::Tz => [0.0, 0.0, -1.0],
            Axis::Rx => [0.0, q[2], -q[1]],
            Axis::Ry => [-q[2], 0.0, q[0]],
            Axis::Rz => [q[1], -q[0], 0.0],
        }
    }

    /// Projection without the depth check; depth is returned for the caller to test.
    #[inline]
    pub fn project_unchecked(&self, p: &Point3, cam: &CameraModel) -> (PixelPosition, f64) {
        let q = self.camera_coords(p);
        let pos = PixelPosition {
            u: cam.fx * q[0] / q[2] + cam.cx,
            v: cam.fy * q[1] / q[2] + cam.cy,
        };
        (pos, q[2])
    }
}

pub fn project(p: &Point3, m: &MotionValue, cam: &CameraModel) -> Result<(PixelPosition, f64)> {
    let (pos, depth) = m.pose().project_unchecked(p, cam);
    if !(depth > 0.0) {
        return Err(PwsError::NonPositiveDepth { depth, value: m.value });
    }
    Ok((pos, depth))
}

pub fn projection_derivative(p: &Point3, m: &MotionValue, cam: &CameraModel) -> Result<(f64, f64)> {
    derivative_at(p, &m.pose(), cam)
}

fn derivative_at(p: &Point3, pose: &Pose, cam: &CameraModel) -> Result<(f64, f64)> {
    let q = pose.camera_coords(p);
    if !(q[2] > 0.0) {
        return Err(PwsError::NonPositiveDepth { depth: q[2], value: pose.value });
    }
    let dq = pose.camera_coords_rate(&q);
    let z2 = q[2] * q[2];
    let du = cam.fx * (dq[0] * q[2] - q[0] * dq[2]) / z2;
    let dv = cam.fy * (dq[1] * q[2] - q[1] * dq[2]) / z2;
    Ok((du, dv))
}

/// Critical points of `a·cosθ + b·sinθ` inside `[lo, hi]`, plus the endpoints.
fn harmonic_candidates(a: f64, b: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut out = vec![lo, hi];
    if a == 0.0 && b == 0.0 {
        return out;
    }
    let phi = b.atan2(a);
    let pi = std::f64::consts::PI;
    let k_lo = ((lo - phi) / pi).floor() as i64;
    let k_hi = ((hi - phi) / pi).ceil() as i64;
    for k in k_lo..=k_hi {
        let t = phi + k as f64 * pi;
        if t > lo && t < hi {
            out.push(t);
        }
    }
    out
}

/// Motion values at which `max(|du|, |dv|)` and the depth attain their extrema over `S`.
fn extremal_values(p: &Point3, spec: &MotionSpec) -> Vec<f64> {
    let (lo, hi) = (spec.lo(), spec.hi());
    match spec.axis {
        Axis::Tx | Axis::Ty | Axis::Tz => vec![lo, hi],
        Axis::Rz => {
            // du ∝ -X sinθ + Y cosθ, dv ∝ -(X cosθ + Y sinθ); depth is constant.
            let mut c = harmonic_candidates(p.y, -p.x, lo, hi);
            c.extend(harmonic_candidates(p.x, p.y, lo, hi).into_iter().skip(2));
            c
        }
        // With depth = R·cos(ψ) on the visible branch, |du| ∝ |sinψ|/cos²ψ and
        // dv ∝ 1/cos²ψ, both increasing in |ψ|: the maxima sit at the endpoints.
        // The depth minimum sits at an endpoint or an interior critical point.
        Axis::Rx => harmonic_candidates(p.z, -p.y, lo, hi),
        Axis::Ry => harmonic_candidates(p.z, p.x, lo, hi),
    }
}

/// Minimum depth of the point over the whole motion set.
pub fn min_depth_over(p: &Point3, spec: &MotionSpec) -> f64 {
    extremal_values(p, spec)
        .into_iter()
        .map(|a| Pose::new(spec.axis, a).camera_coords(p)[2])
        .fold(f64::INFINITY, f64::min)
}

fn ensure_visible_over(p: &Point3, spec: &MotionSpec) -> Result<()> {
    for a in extremal_values(p, spec) {
        let depth = Pose::new(spec.axis, a).camera_coords(p)[2];
        if !(depth > 0.0) {
            return Err(PwsError::NonPositiveDepth { depth, value: a });
        }
    }
    Ok(())
}

pub fn lipschitz_constant(p: &Point3, spec: &MotionSpec, cam: &CameraModel) -> Result<f64> {
    ensure_visible_over(p, spec)?;
    match spec.axis {
        Axis::Tx => Ok(cam.fx / p.z),
        Axis::Ty => Ok(cam.fy / p.z),
        Axis::Tz => {
            let z = p.z - spec.radius;
            Ok((cam.fx * p.x.abs()).max(cam.fy * p.y.abs()) / (z * z))
        }
        Axis::Rx | Axis::Ry | Axis::Rz => {
            let mut best: f64 = 0.0;
            for a in extremal_values(p, spec) {
                let (du, dv) = derivative_at(p, &Pose::new(spec.axis, a), cam)?;
                best = best.max(du.abs()).max(dv.abs());
            }
            Ok(best)
        }
    }
}

/// Relaxation constant bounding the Lipschitz constant of any point hidden
/// within `delta` pixels behind a one-frame point.
pub fn delta_constant(spec: &MotionSpec, cam: &CameraModel, one_frame: &ColoredPointCloud, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(PwsError::InvalidInput(format!("delta must be positive, got {delta}")));
    }
    let points = one_frame.points();
    for p in points {
        ensure_visible_over(p, spec)?;
    }
    let b = spec.radius;
    let (fx, fy) = (cam.fx, cam.fy);
    let endpoint_trig = [(-b).sin_cos(), b.sin_cos()];
    let value = match spec.axis {
        Axis::Tx | Axis::Ty => 0.0,
        Axis::Tz => points.iter().map(|p| delta / (p.z - b)).fold(0.0, f64::max),
        Axis::Rz => (fx / fy).max(fy / fx) * delta,
        Axis::Rx => {
            let mut worst: f64 = 0.0;
            for p in points {
                for &(s, c) in &endpoint_trig {
                    let depth = -p.y * s + p.z * c;
                    let num = (p.y * c + p.z * s).abs();
                    let first = (delta / fy) * (fx * p.x.abs() + fy * num) / depth;
                    let second = 2.0 * delta * num / depth;
                    worst = worst.max(first).max(second);
                }
            }
            delta * delta / fy + worst
        }
        Axis::Ry => {
            let mut worst: f64 = 0.0;
            for p in points {
                for &(s, c) in &endpoint_trig {
                    let depth = p.x * s + p.z * c;
                    let num = (p.x * c - p.z * s).abs();
                    let first = 2.0 * delta * num / depth;
                    let second = (delta / fx) * (fy * p.y.abs() + fx * num) / depth;
                    worst = worst.max(first).max(second);
                }
            }
            (delta * delta / fx).max(delta * delta / fy) + worst
        }
    };
    Ok(value)
}

/// General rigid-motion projection `K·R⁻¹(P − t)/D` with `R = exp(ω^)` via Rodrigues.
/// Used to cross-check the one-axis closed forms.
pub fn project_rigid(p: &Point3, omega: [f64; 3], t: [f64; 3], cam: &CameraModel) -> Result<(PixelPosition, f64)> {
    let r = rodrigues(omega);
    let d = [p.x - t[0], p.y - t[1], p.z - t[2]];
    // R⁻¹ = Rᵀ
    let q: [f64; 3] = std::array::from_fn(|i| r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2]);
    if !(q[2] > 0.0) {
        return Err(PwsError::NonPositiveDepth { depth: q[2], value: f64::NAN });
    }
    Ok((
        PixelPosition {
            u: cam.fx * q[0] / q[2] + cam.cx,
            v: cam.fy * q[1] / q[2] + cam.cy,
        },
        q[2],
    ))
}

fn rodrigues(omega: [f64; 3]) -> [[f64; 3]; 3] {
    let theta = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if theta == 0.0 {
        return r;
    }
    let k = [omega[0] / theta, omega[1] / theta, omega[2] / theta];
    let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
    let (s, c) = theta.sin_cos();
    for i in 0..3 {
        for j in 0..3 {
            let kk: f64 = (0..3).map(|m| kx[i][m] * kx[m][j]).sum();
            r[i][j] += s * kx[i][j] + (1.0 - c) * kk;
        }
    }
    r
}

/// The single-axis motion expressed as a rotation vector and translation.
pub fn axis_motion(axis: Axis, value: f64) -> ([f64; 3], [f64; 3]) {
    let mut omega = [0.0; 3];
    let mut t = [0.0; 3];
    match axis {
        Axis::Tx => t[0] = value,
        Axis::Ty => t[1] = value,
        Axis::Tz => t[2] = value,
        Axis::Rx => omega[0] = value,
        Axis::Ry => omega[1] = value,
        Axis::Rz => omega[2] = value,
    }
    (omega, t)
}
