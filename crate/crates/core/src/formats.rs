//! On-disk formats: `PWSI1` binary images and `PWSPC1` text point clouds.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PwsError, Result};
use crate::geometry::Point3;
use crate::rasterizer::{ColoredPointCloud, Image};

/// The format name is five characters but the header field is four bytes wide.
pub const IMAGE_MAGIC: &[u8; 4] = b"PWSI";
pub const CLOUD_MAGIC: &str = "PWSPC1";

fn image_err(message: impl Into<String>) -> PwsError {
    PwsError::Format { format: "PWSI1", message: message.into() }
}

fn cloud_err(message: impl Into<String>) -> PwsError {
    PwsError::Format { format: "PWSPC1", message: message.into() }
}

pub fn encode_image(image: &Image) -> Vec<u8> {
    let (k, h, w) = image.shape();
    let mut out = Vec::with_capacity(16 + 4 * image.data().len());
    out.extend_from_slice(IMAGE_MAGIC);
    for dim in [k, h, w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes an image; values are not range-checked so noised inputs round-trip.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(image_err("missing magic header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (k, h, w) = (dim(0), dim(1), dim(2));
    let count = k
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| image_err("dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != count * 4 {
        return Err(image_err(format!("expected {} data bytes, found {}", count * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Image::new(k, h, w, data)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_image(image))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_image(&bytes)
}

/// Floats are written in shortest round-trip form, so parsing restores them exactly.
pub fn encode_cloud(cloud: &ColoredPointCloud) -> String {
    let k = cloud.channels();
    let mut out = format!("{CLOUD_MAGIC} {} {k}\n", cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        write!(out, "{} {} {}", p.x, p.y, p.z).unwrap();
        for c in cloud.color(i) {
            write!(out, " {c}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn decode_cloud(text: &str) -> Result<ColoredPointCloud> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| cloud_err("empty input"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != CLOUD_MAGIC {
        return Err(cloud_err(format!("bad header '{header}'")));
    }
    let count: usize = fields[1].parse().map_err(|_| cloud_err("bad point count"))?;
    let k: usize = fields[2].parse().map_err(|_| cloud_err("bad channel count"))?;
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count * k);
    for (n, line) in lines.enumerate() {
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != 3 + k {
            return Err(cloud_err(format!("line {} has {} fields, expected {}", n + 2, values.len(), 3 + k)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| cloud_err(format!("line {}: bad number '{s}'", n + 2)));
        points.push(Point3::new(num(values[0])?, num(values[1])?, num(values[2])?));
        for v in &values[3..] {
            colors.push(v.parse::<f32>().map_err(|_| cloud_err(format!("line {}: bad color '{v}'", n + 2)))?);
        }
    }
    if points.len() != count {
        return Err(cloud_err(format!("header declares {count} points, found {}", points.len())));
    }
    ColoredPointCloud::new(points, colors, k)
}

pub fn write_cloud(path: &Path, cloud: &ColoredPointCloud) -> Result<()> {
    std::fs::write(path, encode_cloud(cloud))?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<ColoredPointCloud> {
    decode_cloud(&std::fs::read_to_string(path)?)
}
