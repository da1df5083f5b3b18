//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   rgb/*.png        8-bit colour
//!   thermal/*.tiff   raw readings (16-bit or float), or pre-normalized thermal/*.png
//!   mask/*.png       8-bit grayscale, 0 = background, 255 = glass
//!   manifest.csv     rgb_path, thermal_path, mask_path, scene_tag, split
//! ```
//!
//! Manifest paths are relative to the manifest's directory. `mask_path` may be
//! empty. Lines starting with `#` are comments.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datakit::image::{BinaryMask, Image};
use crate::datakit::sample::{RgbtSample, SampleMeta};
use crate::datakit::thermal::{normalize_thermal, RawThermal};
use crate::error::{GlassError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub thermal: PathBuf,
    pub mask: Option<PathBuf>,
    pub scene: String,
    pub split: String,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<RgbtSample> {
        let mut sample = load_pair(&self.rgb, &self.thermal, self.mask.as_deref())?;
        sample.meta.scene = self.scene.clone();
        Ok(sample)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GlassError::MissingFile(path.to_path_buf()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| GlassError::Config(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| GlassError::Config(format!("{}: {e}", path.display())))?;
            if record.len() != 5 {
                return Err(GlassError::Config(format!(
                    "{} record {}: expected 5 fields (rgb, thermal, mask, scene, split), found {}",
                    path.display(),
                    i + 1,
                    record.len()
                )));
            }
            let resolve = |p: &str| base.join(p);
            entries.push(ManifestEntry {
                rgb: resolve(&record[0]),
                thermal: resolve(&record[1]),
                mask: (!record[2].is_empty()).then(|| resolve(&record[2])),
                scene: record[3].to_string(),
                split: record[4].to_string(),
            });
        }
        Ok(Self { entries })
    }

    /// Writes paths relative to the manifest's directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::from("# rgb, thermal, mask, scene, split\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}, {}, {}, {}, {}\n",
                rel(&e.rgb),
                rel(&e.thermal),
                e.mask.as_deref().map(rel).unwrap_or_default(),
                e.scene,
                e.split
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == name).collect()
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<RgbtSample>> {
        self.split(name).into_iter().map(ManifestEntry::load).collect()
    }
}

fn decode_err(path: &Path, reason: impl ToString) -> GlassError {
    GlassError::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(GlassError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(|e| decode_err(path, e))
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = open_image(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    Image::new(h as usize, w as usize, 3, img.into_raw())
}

/// 8-bit masks binarize at 128, i.e. at half of full scale.
/// First channel scaled to `[0, 1]`, e.g. a saved probability map.
pub fn read_gray(path: &Path) -> Result<Image> {
    let img = open_image(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    Image::new(h as usize, w as usize, 1, img.into_raw())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open_image(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v >= 0.5)).collect();
    BinaryMask::new(h as usize, w as usize, data)
}

/// Raw thermal readings. TIFF files carry absolute values; PNG files are read
/// at their stored scale, which min-max normalization makes irrelevant.
pub fn read_raw_thermal(path: &Path) -> Result<RawThermal> {
    if !path.exists() {
        return Err(GlassError::MissingFile(path.to_path_buf()));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if ext == "tif" || ext == "tiff" {
        read_tiff_thermal(path)
    } else {
        let img = open_image(path)?.to_luma32f();
        let (w, h) = img.dimensions();
        RawThermal::new(h as usize, w as usize, img.into_raw())
    }
}

fn read_tiff_thermal(path: &Path) -> Result<RawThermal> {
    use tiff::decoder::{Decoder, DecodingResult};
    let file = fs::File::open(path)?;
    let mut decoder = Decoder::new(std::io::BufReader::new(file)).map_err(|e| decode_err(path, e))?;
    let (w, h) = decoder.dimensions().map_err(|e| decode_err(path, e))?;
    let values: Vec<f32> = match decoder.read_image().map_err(|e| decode_err(path, e))? {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(decode_err(path, "unsupported TIFF sample format")),
    };
    if values.len() != (w * h) as usize {
        return Err(decode_err(path, "thermal TIFF must have a single channel"));
    }
    RawThermal::new(h as usize, w as usize, values)
}

/// Loads an aligned triple. Thermal is bilinearly resampled to the colour
/// resolution when they differ, then min-max normalized.
pub fn load_pair(rgb_path: &Path, thermal_path: &Path, mask_path: Option<&Path>) -> Result<RgbtSample> {
    let rgb = read_rgb(rgb_path)?;
    let raw = read_raw_thermal(thermal_path)?;
    let mut thermal = normalize_thermal(&raw)?;
    if thermal.dims() != rgb.dims() {
        let (h, w) = rgb.dims();
        thermal = thermal.resize_bilinear(h, w);
    }
    let mask = mask_path.map(read_mask).transpose()?;
    if let Some(m) = &mask {
        if m.dims() != rgb.dims() {
            return Err(GlassError::shape(format!(
                "mask {} is {:?} but rgb is {:?}",
                mask_path.unwrap().display(),
                m.dims(),
                rgb.dims()
            )));
        }
    }
    let meta = SampleMeta {
        source: rgb_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        scene: String::new(),
        area_ratio: mask.as_ref().map(BinaryMask::area_ratio),
    };
    RgbtSample::new(rgb, thermal, mask, meta)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|e| decode_err(path, e))
}

pub fn write_rgb_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let buf: Vec<u8> = (0..h * w * 3)
        .map(|i| to_u8(img.data()[(i / 3) * img.channels() + (i % 3).min(img.channels() - 1)]))
        .collect();
    let rgb = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    save(DynamicImage::ImageRgb8(rgb), path)
}

/// First channel as 8-bit grayscale.
pub fn write_gray_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let buf: Vec<u8> = img.data().chunks_exact(img.channels()).map(|px| to_u8(px[0])).collect();
    let gray = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    save(DynamicImage::ImageLuma8(gray), path)
}

/// First channel as 16-bit grayscale scaled to full range.
pub fn write_gray16_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let buf: Vec<u16> = img
        .data()
        .chunks_exact(img.channels())
        .map(|px| (px[0].clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let gray: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
    save(DynamicImage::ImageLuma16(gray), path)
}

pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let buf = mask.data().iter().map(|&v| v * 255).collect();
    let gray = GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    save(DynamicImage::ImageLuma8(gray), path)
}

/// Writes samples in the standard layout and returns the manifest (also saved
/// as `root/manifest.csv`). `split_of(i)` names the split of sample `i`.
pub fn write_dataset(
    root: &Path,
    samples: &[RgbtSample],
    split_of: impl Fn(usize) -> String,
) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:05}");
        let rgb = root.join("rgb").join(format!("{stem}.png"));
        let thermal = root.join("thermal").join(format!("{stem}.png"));
        write_rgb_png(s.rgb(), &rgb)?;
        write_gray16_png(s.thermal(), &thermal)?;
        let mask = match s.mask() {
            Some(m) => {
                let p = root.join("mask").join(format!("{stem}.png"));
                write_mask_png(m, &p)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            rgb,
            thermal,
            mask,
            scene: if s.meta.scene.is_empty() { "unknown".into() } else { s.meta.scene.clone() },
            split: split_of(i),
        });
    }
    let manifest = Manifest { entries };
    manifest.write(&root.join("manifest.csv"))?;
    Ok(manifest)
}
