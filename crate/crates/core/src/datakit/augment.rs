//! Training-time geometric augmentation: random horizontal flip, random
//! rescale, random crop. One transform is drawn per call and applied to every
//! modality and to the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::image::BinaryMask;
use crate::datakit::sample::RgbtSample;
use crate::error::{GlassError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub resize_scale_range: (f64, f64),
    /// `(height, width)` of the output.
    pub crop_size: (usize, usize),
    pub rng_seed: u64,
    /// Zero-pad when the rescaled image is smaller than the crop window.
    pub pad_to_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            resize_scale_range: (0.75, 1.25),
            crop_size: (384, 384),
            rng_seed: 0,
            pad_to_crop: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(GlassError::Config(format!(
                "augment.flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        let (lo, hi) = self.resize_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(GlassError::Config(format!(
                "augment.resize_scale_range must satisfy 0 < low <= high, got ({lo}, {hi})"
            )));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(GlassError::Config("augment.crop_size must be positive".into()));
        }
        Ok(())
    }

    /// Same parameters with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..self.clone()
        }
    }
}

pub fn augment(sample: &RgbtSample, cfg: &AugmentConfig) -> Result<RgbtSample> {
    cfg.validate()?;
    let mask = sample
        .mask()
        .ok_or_else(|| GlassError::invalid("augmentation needs a ground-truth mask"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let flip = rng.random::<f64>() < cfg.flip_probability;
    let (lo, hi) = cfg.resize_scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };

    let (h, w) = sample.dims();
    let rh = ((h as f64 * scale).round() as usize).max(1);
    let rw = ((w as f64 * scale).round() as usize).max(1);
    let (ch, cw) = cfg.crop_size;
    if !cfg.pad_to_crop && (ch > rh || cw > rw) {
        return Err(GlassError::invalid(format!(
            "crop {ch}x{cw} exceeds rescaled image {rh}x{rw}"
        )));
    }
    let top = pick_offset(&mut rng, rh, ch);
    let left = pick_offset(&mut rng, rw, cw);

    let geom = |img: &crate::datakit::image::Image| {
        let img = if flip { img.flip_horizontal() } else { img.clone() };
        img.resize_bilinear(rh, rw).crop_padded(top, left, ch, cw)
    };
    let rgb = geom(sample.rgb());
    let thermal = geom(sample.thermal());
    let mask_img = geom(&mask.to_image());
    let mask = BinaryMask::threshold(&mask_img, 0.5);

    let mut meta = sample.meta.clone();
    meta.area_ratio = Some(mask.area_ratio());
    RgbtSample::new(rgb, thermal, Some(mask), meta)
}

/// Offset of the crop window along one axis; negative when padding.
fn pick_offset(rng: &mut ChaCha8Rng, size: usize, crop: usize) -> isize {
    let slack = size as i64 - crop as i64;
    let off = match slack {
        0 => 0,
        s if s > 0 => rng.random_range(0..=s),
        s => rng.random_range(s..=0),
    };
    off as isize
}
