//! Plain raster containers used throughout the data pipeline.
//!
//! Images are stored row-major with interleaved channels (`H × W × C`).
//! Resampling follows the half-pixel convention (`align_corners = false`).

use crate::error::{GlassError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(GlassError::invalid(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(GlassError::shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
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

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel-planar copy (`C × H × W`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f32]) -> Result<Self> {
        let plane = height * width;
        if planar.len() != plane * channels {
            return Err(GlassError::shape(format!(
                "planar buffer of {} values does not match {channels}x{height}x{width}",
                planar.len()
            )));
        }
        Ok(Self::from_fn(height, width, channels, |y, x, c| {
            planar[c * plane + y * width + x]
        }))
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let ty = bilinear_taps(self.height, height);
        let tx = bilinear_taps(self.width, width);
        let mut out = Image::filled(height, width, self.channels, 0.0);
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.set(y, x, c, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Crops the window at `(top, left)`; pixels outside the source read as zero.
    pub fn crop_padded(&self, top: isize, left: isize, height: usize, width: usize) -> Image {
        Image::from_fn(height, width, self.channels, |y, x, c| {
            let sy = top + y as isize;
            let sx = left + x as isize;
            if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                0.0
            } else {
                self.get(sy as usize, sx as usize, c)
            }
        })
    }

    /// Single channel `c` as its own image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }
}

/// Binary mask with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(GlassError::invalid("mask dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(GlassError::shape(format!(
                "mask buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(GlassError::invalid(format!("mask value {v} is not binary")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Foreground where `values >= threshold`.
    pub fn threshold(image: &Image, threshold: f32) -> Self {
        let c = image.channels();
        let data = image
            .data()
            .chunks_exact(c)
            .map(|px| u8::from(px[0] >= threshold))
            .collect();
        Self {
            height: image.height(),
            width: image.width(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn area_ratio(&self) -> f64 {
        self.count_foreground() as f64 / self.data.len() as f64
    }

    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn transpose(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |y, x| self.get(x, y))
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Nearest-neighbour resampling on a normalized grid (pixel centres).
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            let sy = nearest_index(y, height, self.height);
            let sx = nearest_index(x, width, self.width);
            self.get(sy, sx)
        })
    }
}

fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

/// Two-tap linear interpolation weights mapping `dst_len` output samples onto
/// `src_len` input samples under the half-pixel convention.
///
/// Each entry is `(i0, i1, frac)`: output = `src[i0] * (1 - frac) + src[i1] * frac`.
pub fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            let frac = if i1 == i0 { 0.0 } else { (pos - i0 as f64) as f32 };
            (i0, i1, frac)
        })
        .collect()
}
