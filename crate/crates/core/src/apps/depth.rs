//! Depth maps in meters and their file formats: 16-bit PNG in millimeters,
//! `.npy` float arrays, and ASCII PLY point clouds.

use std::io::{BufWriter, Write as _};
use std::path::Path;

use image::{ImageBuffer, Luma};
use npyz::WriterBuilder;

use crate::apps::plane::CameraIntrinsics;
use crate::datakit::BinaryMask;
use crate::error::{GlassError, Result};

/// Row-major depths in meters; `0` marks a missing reading.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(GlassError::shape(format!(
                "{} depth values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Self { height, width, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

fn decode_err(path: &Path, reason: impl ToString) -> GlassError {
    GlassError::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads a depth map by extension: `.png` (16-bit millimeters) or `.npy`.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    if !path.exists() {
        return Err(GlassError::MissingFile(path.to_path_buf()));
    }
    match extension(path).as_str() {
        "png" => read_depth_png(path),
        "npy" => read_depth_npy(path),
        other => Err(decode_err(path, format!("unsupported depth format `{other}`"))),
    }
}

pub fn write_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    match extension(path).as_str() {
        "png" => write_depth_png(depth, path),
        "npy" => write_depth_npy(depth, path),
        other => Err(GlassError::invalid(format!("unsupported depth format `{other}`"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| decode_err(path, e))?.into_luma16();
    let (w, h) = img.dimensions();
    DepthMap::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v as f64 / 1000.0).collect())
}

/// Millimeters, rounded and clamped to the 16-bit range.
pub fn write_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let (h, w) = depth.dims();
    let raw: Vec<u16> = depth
        .data()
        .iter()
        .map(|&m| if m.is_finite() && m > 0.0 { (m * 1000.0).round().min(u16::MAX as f64) as u16 } else { 0 })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| decode_err(path, e))
}

pub fn read_depth_npy(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path)?;
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| decode_err(path, e))?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let (h, w) = match shape[..] {
        [h, w] | [h, w, 1] => (h, w),
        _ => return Err(decode_err(path, format!("expected a 2-D array, got shape {shape:?}"))),
    };
    if npy.order() != npyz::Order::C {
        return Err(decode_err(path, "only C-order arrays are supported"));
    }
    let type_str = match npy.dtype() {
        npyz::DType::Plain(t) => t.to_string(),
        other => return Err(decode_err(path, format!("unsupported dtype {other:?}"))),
    };
    let data: Vec<f64> = match &type_str[1..] {
        "f8" => npy.into_vec::<f64>().map_err(|e| decode_err(path, e))?,
        "f4" => npy.into_vec::<f32>().map_err(|e| decode_err(path, e))?.into_iter().map(f64::from).collect(),
        other => return Err(decode_err(path, format!("unsupported dtype `{other}`"))),
    };
    DepthMap::new(h, w, data)
}

pub fn write_depth_npy(depth: &DepthMap, path: &Path) -> Result<()> {
    let (h, w) = depth.dims();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let mut writer = npyz::WriteOptions::new()
        .default_dtype()
        .shape(&[h as u64, w as u64])
        .writer(&mut out)
        .begin_nd()?;
    writer.extend(depth.data().iter().copied())?;
    writer.finish()?;
    Ok(())
}

/// Writes every valid depth pixel as a 3D point; glass pixels (when a mask
/// is given) are coloured red, others grey.
pub fn write_point_cloud_ply(
    depth: &DepthMap,
    k: &CameraIntrinsics,
    mask: Option<&BinaryMask>,
    path: &Path,
) -> Result<usize> {
    let (h, w) = depth.dims();
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let z = depth.get(y, x);
            if z > 0.0 && z.is_finite() {
                let glass = mask.is_some_and(|m| m.get(y, x));
                points.push((k.back_project(x as f64, y as f64, z), glass));
            }
        }
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(f, "property float x\nproperty float y\nproperty float z")?;
    writeln!(f, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
    for (p, glass) in &points {
        let (r, g, b) = if *glass { (220, 40, 40) } else { (160, 160, 160) };
        writeln!(f, "{:.6} {:.6} {:.6} {r} {g} {b}", p.x, p.y, p.z)?;
    }
    f.flush()?;
    Ok(points.len())
}
