//! Fixed 2D sinusoidal positional encoding.
//!
//! With `q = C / 4` frequencies `ω_k = 10000^(-k/q)`, channel blocks are
//! `[sin(y ω), cos(y ω), sin(x ω), cos(x ω)]`, each `q` wide, where `y` and
//! `x` are integer row and column indices.

use candle_core::{DType, Device, Tensor};

use crate::error::{GlassError, Result};
use crate::nnet::feature::FeatureVolume;

fn table(height: usize, width: usize, channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || channels % 4 != 0 {
        return Err(GlassError::invalid(format!(
            "positional encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let q = channels / 4;
    let freqs: Vec<f64> = (0..q).map(|k| 10000f64.powf(-(k as f64) / q as f64)).collect();
    let mut out = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            for (pos, _) in [(y as f64, 0), (x as f64, 1)] {
                out.extend(freqs.iter().map(|w| (pos * w).sin()));
                out.extend(freqs.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Ok(out)
}

/// `1 × H × W × C` encoding in spatial layout.
pub fn positional_encoding(height: usize, width: usize, channels: usize) -> Result<FeatureVolume> {
    let data = table(height, width, channels)?;
    let t = Tensor::from_vec(data, (1, height * width, channels), &Device::Cpu)?;
    FeatureVolume::from_tokens(t, height, width)?.to_spatial()
}

/// The same encoding as a `1 × C × H × W` tensor for adding to feature maps.
pub fn positional_encoding_nchw(
    height: usize,
    width: usize,
    channels: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let data = table(height, width, channels)?;
    Ok(Tensor::from_vec(data, (1, height, width, channels), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}
