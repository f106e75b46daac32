//! Z-buffered point splatting: each point lands in the pixel containing the floor
//! of its projected position, and the nearest point wins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PwsError, Result};
use crate::geometry::{CameraModel, MotionSpec, MotionValue, Point3, Pose};

/// Owner value for a pixel that no point covers.
pub const NO_OWNER: u32 = u32::MAX;

/// Clouds at least this large are projected in parallel before the z-buffer pass.
const PARALLEL_PROJECTION_MIN: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredPointCloud {
    points: Vec<Point3>,
    /// Row-major `points.len() × channels`.
    colors: Vec<f32>,
    channels: usize,
}

impl ColoredPointCloud {
    pub fn new(points: Vec<Point3>, colors: Vec<f32>, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(PwsError::InvalidInput("point cloud needs at least one channel".into()));
        }
        if colors.len() != points.len() * channels {
            return Err(PwsError::shape(
                format!("{} color entries", points.len() * channels),
                format!("{}", colors.len()),
            ));
        }
        if let Some(c) = colors.iter().find(|c| !(**c >= 0.0 && **c <= 1.0)) {
            return Err(PwsError::InvalidInput(format!("color entry {c} outside [0, 1]")));
        }
        if let Some(p) = points.iter().find(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
            return Err(PwsError::InvalidInput(format!("non-finite point {p:?}")));
        }
        if points.len() >= NO_OWNER as usize {
            return Err(PwsError::InvalidInput("point cloud too large".into()));
        }
        Ok(ColoredPointCloud { points, colors, channels })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn colors(&self) -> &[f32] {
        &self.colors
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn color(&self, index: usize) -> &[f32] {
        &self.colors[index * self.channels..(index + 1) * self.channels]
    }

    /// Sub-cloud made of the given point indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> ColoredPointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let colors = indices.iter().flat_map(|&i| self.color(i).iter().copied()).collect();
        ColoredPointCloud { points, colors, channels: self.channels }
    }
}

/// `channels × height × width` image stored in (k, row, column) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(PwsError::shape(
                format!("{channels}x{height}x{width} = {} values", channels * height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: &[f32]) -> Result<Self> {
        if value.len() != channels {
            return Err(PwsError::shape(format!("{channels} channel values"), value.len()));
        }
        let plane = height * width;
        let mut data = Vec::with_capacity(channels * plane);
        for &v in value {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, k: usize, row: usize, col: usize) -> f32 {
        self.data[(k * self.height + row) * self.width + col]
    }

    /// All channel values of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.channels).map(|k| self.get(k, row, col)).collect()
    }
}

/// Flat pixel index (`row * width + col`) a projected position falls into, if on the grid.
#[inline]
pub fn pixel_index(u: f64, v: f64, cam: &CameraModel) -> Option<usize> {
    // Comparisons are false for NaN, so non-finite positions fall through.
    if u >= 0.0 && v >= 0.0 && u < cam.width as f64 && v < cam.height as f64 {
        let col = u.floor() as usize;
        let row = v.floor() as usize;
        if col < cam.width && row < cam.height {
            return Some(row * cam.width + col);
        }
    }
    None
}

#[inline]
fn splat(p: &Point3, pose: &Pose, cam: &CameraModel) -> Option<(usize, f64)> {
    let (pos, depth) = pose.project_unchecked(p, cam);
    if !(depth > 0.0) {
        return None;
    }
    pixel_index(pos.u, pos.v, cam).map(|ix| (ix, depth))
}

/// Index of the z-buffer winner per pixel, [`NO_OWNER`] where nothing projects.
/// Ties in depth go to the smallest point index.
pub fn owner_map(points: &[Point3], pose: &Pose, cam: &CameraModel) -> Vec<u32> {
    let n = cam.pixel_count();
    let mut owner = vec![NO_OWNER; n];
    let mut depth = vec![f64::INFINITY; n];
    let mut update = |i: usize, (ix, d): (usize, f64)| {
        if d < depth[ix] {
            depth[ix] = d;
            owner[ix] = i as u32;
        }
    };
    if points.len() >= PARALLEL_PROJECTION_MIN {
        // Projection runs in parallel; the compare-and-set pass stays sequential in
        // index order so the result is identical to the sequential z-buffer.
        let splats: Vec<Option<(usize, f64)>> = points.par_iter().map(|p| splat(p, pose, cam)).collect();
        for (i, s) in splats.into_iter().enumerate() {
            if let Some(s) = s {
                update(i, s);
            }
        }
    } else {
        for (i, p) in points.iter().enumerate() {
            if let Some(s) = splat(p, pose, cam) {
                update(i, s);
            }
        }
    }
    owner
}

pub fn colorize(cloud: &ColoredPointCloud, owner: &[u32], cam: &CameraModel, background: &[f32]) -> Result<Image> {
    let k = cloud.channels();
    let mut image = Image::filled(k, cam.height, cam.width, background)?;
    let plane = cam.pixel_count();
    for (ix, &o) in owner.iter().enumerate() {
        if o != NO_OWNER {
            for (c, &value) in cloud.color(o as usize).iter().enumerate() {
                image.data[c * plane + ix] = value;
            }
        }
    }
    Ok(image)
}

fn check_background(cloud: &ColoredPointCloud, background: &[f32]) -> Result<()> {
    if background.len() != cloud.channels() {
        return Err(PwsError::shape(format!("{} background channels", cloud.channels()), background.len()));
    }
    if let Some(c) = background.iter().find(|c| !(**c >= 0.0 && **c <= 1.0)) {
        return Err(PwsError::InvalidInput(format!("background entry {c} outside [0, 1]")));
    }
    Ok(())
}

/// Default background: mid-gray in every channel.
pub fn default_background(channels: usize) -> Vec<f32> {
    vec![0.5; channels]
}

pub fn render(cloud: &ColoredPointCloud, m: &MotionValue, cam: &CameraModel, background: &[f32]) -> Result<Image> {
    check_background(cloud, background)?;
    let owner = owner_map(cloud.points(), &m.pose(), cam);
    colorize(cloud, &owner, cam, background)
}

pub fn render_sweep(
    cloud: &ColoredPointCloud,
    spec: &MotionSpec,
    cam: &CameraModel,
    values: &[f64],
    background: &[f32],
) -> Result<Vec<Image>> {
    check_background(cloud, background)?;
    let motions = values.iter().map(|&v| spec.value(v)).collect::<Result<Vec<_>>>()?;
    motions
        .par_iter()
        .map(|m| colorize(cloud, &owner_map(cloud.points(), &m.pose(), cam), cam, background))
        .collect()
}

pub fn adjacent_frame_error(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(PwsError::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((0.5 * sum).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Axis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(n: usize) -> CameraModel {
        CameraModel::new(n as f64, n as f64, n as f64 / 2.0, n as f64 / 2.0, n, n).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ColoredPointCloud {
        let points = (0..n)
            .map(|_| Point3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(1.0..3.0)))
            .collect();
        let colors = (0..n * k).map(|_| rng.random::<f32>()).collect();
        ColoredPointCloud::new(points, colors, k).unwrap()
    }

    fn zero(axis: Axis) -> MotionValue {
        MotionSpec::new(axis, 0.1).unwrap().value(0.0).unwrap()
    }

    #[test]
    fn nearer_point_wins() {
        let cloud = ColoredPointCloud::new(
            vec![Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, 1.0)],
            vec![0.1, 0.9],
            1,
        )
        .unwrap();
        let c = CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let img = render(&cloud, &zero(Axis::Tx), &c, &[0.5]).unwrap();
        assert_eq!(img.get(0, 50, 50), 0.9);
        assert_eq!(img.get(0, 10, 10), 0.5);
        let lit = img.data().iter().filter(|&&v| v != 0.5).count();
        assert_eq!(lit, 1);
    }

    #[test]
    fn depth_tie_goes_to_first_point() {
        let cloud = ColoredPointCloud::new(
            vec![Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, 2.0)],
            vec![0.2, 0.8],
            1,
        )
        .unwrap();
        let img = render(&cloud, &zero(Axis::Tz), &cam(8), &[0.5]).unwrap();
        assert_eq!(img.get(0, 4, 4), 0.2);
    }

    #[test]
    fn points_behind_camera_are_skipped() {
        let cloud = ColoredPointCloud::new(vec![Point3::new(0.0, 0.0, -2.0)], vec![0.0], 1).unwrap();
        let img = render(&cloud, &zero(Axis::Tz), &cam(8), &[0.5]).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn frame_error_examples() {
        let a = Image::new(1, 1, 1, vec![0.0]).unwrap();
        let b = Image::new(1, 1, 1, vec![1.0]).unwrap();
        assert!((adjacent_frame_error(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(adjacent_frame_error(&a, &a).unwrap(), 0.0);
        let c = Image::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(adjacent_frame_error(&a, &c), Err(PwsError::ShapeMismatch { .. })));
    }

    #[test]
    fn frame_error_matches_reordered_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..3 * 17 * 13).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..3 * 17 * 13).map(|_| rng.random()).collect();
        let mut terms: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).collect();
        terms.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let oracle = (0.5 * terms.iter().rev().sum::<f64>()).sqrt();
        let ia = Image::new(3, 17, 13, a).unwrap();
        let ib = Image::new(3, 17, 13, b).unwrap();
        assert!((adjacent_frame_error(&ia, &ib).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn sweep_matches_single_renders() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = random_cloud(&mut rng, 400, 3);
        let spec = MotionSpec::new(Axis::Ry, 0.05).unwrap();
        let c = cam(32);
        let values = spec.uniform_values(11);
        let bg = default_background(3);
        let sweep = render_sweep(&cloud, &spec, &c, &values, &bg).unwrap();
        for (v, img) in values.iter().zip(&sweep) {
            assert_eq!(img, &render(&cloud, &spec.value(*v).unwrap(), &c, &bg).unwrap());
            assert!(img.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
        for w in sweep.windows(2) {
            assert!(adjacent_frame_error(&w[0], &w[1]).unwrap().is_finite());
        }
        assert!(render_sweep(&cloud, &spec, &c, &[0.06], &bg).is_err());
    }

    #[test]
    fn on_axis_point_is_static_under_its_own_roll() {
        let cloud = ColoredPointCloud::new(vec![Point3::new(0.0, 0.0, 2.0)], vec![0.3], 1).unwrap();
        let spec = MotionSpec::new(Axis::Rz, 0.2).unwrap();
        let frames = render_sweep(&cloud, &spec, &cam(9), &[-0.2, 0.0, 0.2], &[0.5]).unwrap();
        assert_eq!(frames[0], frames[1]);
        assert_eq!(frames[1], frames[2]);
    }

    #[test]
    fn parallel_projection_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, PARALLEL_PROJECTION_MIN + 1000, 1);
        let c = cam(48);
        let pose = Pose::new(Axis::Tx, 0.01);
        let par = owner_map(cloud.points(), &pose, &c);
        let mut seq = vec![NO_OWNER; c.pixel_count()];
        let mut depth = vec![f64::INFINITY; c.pixel_count()];
        for (i, p) in cloud.points().iter().enumerate() {
            if let Some((ix, d)) = splat(p, &pose, &c) {
                if d < depth[ix] {
                    depth[ix] = d;
                    seq[ix] = i as u32;
                }
            }
        }
        assert_eq!(par, seq);
    }

    #[test]
    fn occlusion_recheck_on_small_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..4 {
            let cloud = random_cloud(&mut rng, 3000, 1);
            let c = cam(40);
            let axis = Axis::ALL[trial];
            let pose = Pose::new(axis, 0.03);
            let owner = owner_map(cloud.points(), &pose, &c);
            // Brute-force: every point that lands in a pixel must be no nearer than the owner.
            for (i, p) in cloud.points().iter().enumerate() {
                if let Some((ix, d)) = splat(p, &pose, &c) {
                    let o = owner[ix];
                    assert_ne!(o, NO_OWNER);
                    let (_, od) = pose.project_unchecked(&cloud.points()[o as usize], &c);
                    assert!(od < d || (od == d && (o as usize) <= i));
                }
            }
        }
    }
}
