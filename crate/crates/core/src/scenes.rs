//! Synthetic labeled scenes, one-frame extraction and corpus directories.
//!
//! A scene is a class-specific relief (a raised panel, a cap, a box, a striped band)
//! standing in front of a flat gray wall, sampled like a depth camera that records
//! every return along a lattice of rays. The relief is sampled a little finer than
//! the pixel grid so motion never opens holes in it; the wall is sampled coarser.
//! No return is ever hidden behind another in a capture at [`CAPTURE_FACTOR`] times
//! the image resolution, so a capture at that resolution recovers the whole cloud.
//! A positive margin adds rays outside the field of view, which motion can bring
//! into view with nothing in front.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};
use crate::formats::{read_cloud, write_cloud};
use crate::geometry::{Axis, CameraModel, Point3, Pose};
use crate::rasterizer::{owner_map, ColoredPointCloud, NO_OWNER};
use crate::smoothing::derive_seed;

pub const MIN_POINT_COUNT: usize = 100;
pub const DEFAULT_MIN_COVERAGE: f64 = 0.5;
const RIM_PX: f64 = 5.0;
/// Capture resolution, per axis, relative to the classifier image.
pub const CAPTURE_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Billboard,
    SphereCap,
    BoxFace,
    StripedWall,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Billboard,
        ShapeClass::SphereCap,
        ShapeClass::BoxFace,
        ShapeClass::StripedWall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeClass::Billboard => "billboard",
            ShapeClass::SphereCap => "sphere-cap",
            ShapeClass::BoxFace => "box-face",
            ShapeClass::StripedWall => "striped-wall",
        }
    }

    fn index(self) -> u64 {
        ShapeClass::ALL.iter().position(|c| *c == self).unwrap() as u64
    }

    /// Color offset from the backdrop gray, per RGB channel.
    fn tint(self) -> [f64; 3] {
        match self {
            ShapeClass::Billboard => [0.12, -0.05, -0.05],
            ShapeClass::SphereCap => [-0.05, 0.12, -0.05],
            ShapeClass::BoxFace => [-0.05, -0.05, 0.12],
            ShapeClass::StripedWall => [0.09, 0.09, -0.08],
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeClass {
    type Err = PwsError;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PwsError::InvalidInput(format!("unknown shape class '{s}'")))
    }
}

/// Default capture camera: 64×64 pixels with a 53° field of view.
pub fn default_camera() -> CameraModel {
    CameraModel { fx: 64.0, fy: 64.0, cx: 32.0, cy: 32.0, width: 64, height: 64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub camera: CameraModel,
    /// Upper bound on the number of points; the lattice is thinned until it fits.
    pub point_count: usize,
    /// Wall lattice pitch in pixels along u and v. Unequal pitches keep pixel
    /// crossings of different rows and columns at distinct motion values.
    pub pitch: (f64, f64),
    /// Object lattice pitch; finer than a pixel so the object never shows holes.
    pub object_pitch: (f64, f64),
    /// Depth of the object's highest point and of the wall, in metres.
    pub depth_range: (f64, f64),
    /// Extra rays beyond each image border, in pixels.
    pub margin: usize,
    pub min_coverage: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            camera: default_camera(),
            point_count: 5000,
            pitch: (1.3, 1.2),
            object_pitch: (0.93, 0.91),
            depth_range: (1.75, 2.0),
            margin: 0,
            min_coverage: DEFAULT_MIN_COVERAGE,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (near, far) = self.depth_range;
        if !(near > 0.5 && near < far && far < 10.0) {
            return Err(PwsError::InvalidRange(format!(
                "depth range ({near}, {far}) must satisfy 0.5 < near < far < 10"
            )));
        }
        for pitch in [self.pitch, self.object_pitch] {
            if !(pitch.0 > 0.0 && pitch.1 > 0.0 && pitch.0.is_finite() && pitch.1.is_finite()) {
                return Err(PwsError::InvalidRange(format!("lattice pitch {pitch:?} must be positive")));
            }
        }
        if self.point_count < MIN_POINT_COUNT {
            return Err(PwsError::InvalidRange(format!(
                "point count {} is below the minimum {MIN_POINT_COUNT}",
                self.point_count
            )));
        }
        if !(self.min_coverage >= 0.0 && self.min_coverage <= 1.0) {
            return Err(PwsError::InvalidRange(format!("coverage {} outside [0, 1]", self.min_coverage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub label: usize,
    pub cloud: ColoredPointCloud,
}

/// Random per-scene layout, all in tangent space (`x/z`, `y/z`).
struct Layout {
    class: ShapeClass,
    gray: f64,
    wall_slope: [f64; 2],
    center: [f64; 2],
    half: [f64; 2],
    tint: [f64; 3],
    tint_slope: [f64; 2],
    stripe_period: f64,
    stripe_phase: f64,
    near: f64,
    far: f64,
    /// Width of the rim over which the relief rises from the wall, and over which
    /// object colors blend into the wall color.
    rim: f64,
}

/// Relief sample along one ray: height above the wall as a fraction of the
/// wall-to-object depth gap, a shading factor for the tint, and the tangent
/// distance inwards from the silhouette.
struct Relief {
    height: f64,
    shade: f64,
    inset: f64,
}

impl Layout {
    fn draw(class: ShapeClass, near: f64, far: f64, rim: f64, rng: &mut ChaCha8Rng) -> Self {
        let gain = rng.random_range(0.85..1.15);
        let half = rng.random_range(0.12..0.18);
        let aspect = rng.random_range(0.85..1.15);
        let (hx, hy) = match class {
            ShapeClass::StripedWall => (1.2 * half * aspect, 0.8 * half),
            _ => (half * aspect, half),
        };
        Layout {
            class,
            gray: rng.random_range(0.48..0.52),
            wall_slope: [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)],
            center: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
            half: [hx, hy],
            tint: class.tint().map(|t| t * gain),
            tint_slope: [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)],
            stripe_period: rng.random_range(0.2..0.26),
            stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
            near,
            far,
            rim,
        }
    }

    fn wall_gray(&self, t: [f64; 2]) -> f64 {
        self.gray + self.wall_slope[0] * t[0] + self.wall_slope[1] * t[1]
    }

    fn on_ray(t: [f64; 2], z: f64) -> Point3 {
        Point3::new(t[0] * z, t[1] * z, z)
    }

    fn wall(&self, t: [f64; 2]) -> (Point3, [f64; 3]) {
        (Layout::on_ray(t, self.far), [self.wall_gray(t); 3])
    }

    fn relief(&self, t: [f64; 2]) -> Option<Relief> {
        let d = [t[0] - self.center[0], t[1] - self.center[1]];
        let inset_y = self.half[1] - d[1].abs();
        let rect_inset = (self.half[0] - d[0].abs()).min(inset_y);
        let ramp = |inset: f64| (inset / self.rim).min(1.0);
        let relief = match self.class {
            ShapeClass::Billboard => Relief { height: ramp(rect_inset), shade: 1.0, inset: rect_inset },
            ShapeClass::StripedWall => {
                let phase = std::f64::consts::TAU * d[0] / self.stripe_period + self.stripe_phase;
                Relief { height: 0.5 * ramp(rect_inset), shade: 0.7 + 0.3 * phase.sin(), inset: rect_inset }
            }
            ShapeClass::BoxFace => {
                // The right-hand side face slopes from the front face back to the wall.
                let side = 0.25 * self.half[0];
                let s = d[0] - self.half[0];
                if s <= 0.0 {
                    let inset = (self.half[0] + d[0]).min(self.half[0] + side - d[0]).min(inset_y);
                    Relief { height: ramp(inset), shade: 1.0, inset }
                } else {
                    let inset = (side - s).min(inset_y);
                    Relief { height: ramp(inset_y).min(1.0 - s / side), shade: 0.75, inset }
                }
            }
            ShapeClass::SphereCap => {
                let r = (d[0] * d[0] + d[1] * d[1]).sqrt() / self.half[1];
                // Cap of a sphere whose height is 0.3 of the footprint radius, in units of the cap height.
                let rho = (1.0 + 0.09) / 0.6;
                let height = ((rho * rho - r * r).max(0.0).sqrt() - (rho - 0.3)) / 0.3;
                Relief { height, shade: 0.7 + 0.3 * height, inset: self.half[1] * (1.0 - r) }
            }
        };
        (relief.inset > 0.0 && relief.height > 0.0).then_some(relief)
    }

    /// Object point and color on the ray through tangent position `t`, if it hits the relief.
    fn object(&self, t: [f64; 2]) -> Option<(Point3, [f64; 3])> {
        let r = self.relief(t)?;
        let z = self.far - r.height * (self.far - self.near);
        let g = self.gray + self.tint_slope[0] * (t[0] - self.center[0]) + self.tint_slope[1] * (t[1] - self.center[1]);
        let w = (r.inset / self.rim).min(1.0);
        let wall = self.wall_gray(t);
        Some((Layout::on_ray(t, z), self.tint.map(|c| wall + w * (g + r.shade * c - wall))))
    }
}

/// Tangent-space directions of the lattice rays. Pitches are in pixels. The first
/// ray sits at a different offset into its pixel along u and v, so that no lattice
/// point is mirrored about the principal point and row and column crossings never
/// line up.
fn lattice(cam: &CameraModel, margin: usize, pitch: [f64; 2]) -> Vec<[f64; 2]> {
    const OFFSET: [f64; 2] = [0.31, 0.67];
    let m = margin as f64;
    let axis = |extent: usize, p: f64, offset: f64| {
        let count = ((extent as f64 + 2.0 * m - offset) / p).ceil() as usize;
        (0..count).map(move |i| offset - m + i as f64 * p)
    };
    let mut rays = Vec::new();
    for v in axis(cam.height, pitch[1], OFFSET[1]) {
        for u in axis(cam.width, pitch[0], OFFSET[0]) {
            rays.push([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy]);
        }
    }
    rays
}

/// Object points along the fine lattice inside the silhouette, then wall points
/// along the coarse lattice outside it. The relief meets the wall continuously, so
/// no point hides behind another and small motions uncover nothing.
/// Capture-grid cell of a ray at the reference pose.
fn capture_cell(cam: &CameraModel, t: [f64; 2]) -> (i64, i64) {
    let f = CAPTURE_FACTOR as f64;
    (((cam.fx * t[0] + cam.cx) * f).floor() as i64, ((cam.fy * t[1] + cam.cy) * f).floor() as i64)
}

fn sample(
    layout: &Layout,
    cam: &CameraModel,
    object_rays: &[[f64; 2]],
    wall_rays: &[[f64; 2]],
    rng: &mut ChaCha8Rng,
) -> (Vec<Point3>, Vec<f32>) {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut push = |(p, c): (Point3, [f64; 3]), jitter: f64| {
        points.push(p);
        colors.extend(c.map(|v| (v + jitter).clamp(0.0, 1.0) as f32));
    };
    let mut taken = HashSet::new();
    for &t in object_rays {
        if let Some(hit) = layout.object(t) {
            push(hit, rng.random_range(-0.003..0.003));
            taken.insert(capture_cell(cam, t));
        }
    }
    // A wall return sharing a capture cell with the object would be hidden in the
    // capture, so the scanner never records it.
    for &t in wall_rays {
        if layout.relief(t).is_none() && !taken.contains(&capture_cell(cam, t)) {
            push(layout.wall(t), 0.0);
        }
    }
    (points, colors)
}

/// Generates one scene; the label is the class's position in [`ShapeClass::ALL`].
pub fn generate_scene(class: ShapeClass, params: &SceneParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let cam = &params.camera;
    let layout = Layout::draw(
        class,
        params.depth_range.0,
        params.depth_range.1,
        RIM_PX / cam.fx,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, class.index())),
    );
    let mut scale = 1.0;
    let (points, colors) = loop {
        let wall = lattice(cam, params.margin, [params.pitch.0 * scale, params.pitch.1 * scale]);
        let object = lattice(cam, params.margin, [params.object_pitch.0 * scale, params.object_pitch.1 * scale]);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 << 32 | class.index()));
        let (points, colors) = sample(&layout, cam, &object, &wall, &mut rng);
        if points.len() <= params.point_count {
            break (points, colors);
        }
        scale *= 1.05;
    };
    let cloud = ColoredPointCloud::new(points, colors, 3)?;
    let covered = coverage(&cloud, cam);
    if covered < params.min_coverage {
        return Err(PwsError::InvalidRange(format!(
            "scene covers {covered:.3} of the grid, below {}",
            params.min_coverage
        )));
    }
    Ok(Scene { name: format!("{class}-{seed}"), label: class.index() as usize, cloud })
}

fn reference_pose() -> Pose {
    Pose::new(Axis::Tx, 0.0)
}

/// Fraction of grid pixels covered at the reference pose.
pub fn coverage(cloud: &ColoredPointCloud, cam: &CameraModel) -> f64 {
    let owners = owner_map(cloud.points(), &reference_pose(), cam);
    owners.iter().filter(|&&o| o != NO_OWNER).count() as f64 / owners.len() as f64
}

/// Camera with the same field of view as `cam` and `factor` times the pixels along
/// each axis, for one-frame captures finer than the classifier image.
pub fn capture_camera(cam: &CameraModel, factor: usize) -> Result<CameraModel> {
    let f = factor as f64;
    CameraModel::new(cam.fx * f, cam.fy * f, cam.cx * f, cam.cy * f, cam.width * factor, cam.height * factor)
}

/// Points visible at the reference pose, in their original order.
pub fn extract_one_frame(cloud: &ColoredPointCloud, cam: &CameraModel) -> Result<ColoredPointCloud> {
    let mut owners: Vec<usize> = owner_map(cloud.points(), &reference_pose(), cam)
        .into_iter()
        .filter(|&o| o != NO_OWNER)
        .map(|o| o as usize)
        .collect();
    if owners.is_empty() {
        return Err(PwsError::EmptyFrame);
    }
    owners.sort_unstable();
    owners.dedup();
    Ok(cloud.select(&owners))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub camera: CameraModel,
    pub scenes: Vec<Scene>,
}

/// `per_class` scenes of each class; labels are positions in `classes`.
pub fn generate_corpus(classes: &[ShapeClass], per_class: usize, params: &SceneParams, seed: u64) -> Result<Corpus> {
    if classes.is_empty() {
        return Err(PwsError::InvalidInput("corpus needs at least one class".into()));
    }
    let mut scenes = Vec::with_capacity(classes.len() * per_class);
    for (label, &class) in classes.iter().enumerate() {
        for i in 0..per_class {
            let stream = (label * per_class + i) as u64;
            let scene = generate_scene(class, params, derive_seed(seed, stream))?;
            scenes.push(Scene { name: format!("{class}-{i:03}"), label, cloud: scene.cloud });
        }
    }
    Ok(Corpus { camera: params.camera, scenes })
}

impl Corpus {
    pub fn label_count(&self) -> usize {
        self.scenes.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    /// Writes `scenes/<name>.pwspc`, `labels.json` and `camera.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let scene_dir = dir.join("scenes");
        std::fs::create_dir_all(&scene_dir)?;
        let mut labels = BTreeMap::new();
        for scene in &self.scenes {
            write_cloud(&scene_dir.join(format!("{}.pwspc", scene.name)), &scene.cloud)?;
            labels.insert(scene.name.clone(), scene.label);
        }
        std::fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)? + "\n")?;
        std::fs::write(dir.join("camera.json"), serde_json::to_string_pretty(&self.camera)? + "\n")?;
        Ok(())
    }

    /// Reads a corpus; scenes come back sorted by name.
    pub fn read(dir: &Path) -> Result<Corpus> {
        let camera: CameraModel = serde_json::from_str(&std::fs::read_to_string(dir.join("camera.json"))?)?;
        camera.validate()?;
        let labels: BTreeMap<String, usize> = serde_json::from_str(&std::fs::read_to_string(dir.join("labels.json"))?)?;
        let scenes = labels
            .into_iter()
            .map(|(name, label)| {
                let cloud = read_cloud(&dir.join("scenes").join(format!("{name}.pwspc")))?;
                Ok(Scene { name, label, cloud })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { camera, scenes })
    }
}
