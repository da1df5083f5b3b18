//! Procedural RGB-T scenes with planted glass.
//!
//! The colour image shows the same background texture everywhere, glass
//! included, so it carries no glass cue. Thermal readings outside the glass
//! follow the background texture; inside each glass region they are a smooth,
//! nearly uniform field, the way a pane reflects a single apparent temperature.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::image::{BinaryMask, Image};
use crate::datakit::sample::{RgbtSample, SampleMeta};
use crate::datakit::thermal::{normalize_thermal, RawThermal};

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Region {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
    shape: Shape,
}

impl Region {
    fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.top || x < self.left || y >= self.top + self.height || x >= self.left + self.width {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let ry = self.height as f32 / 2.0;
                let rx = self.width as f32 / 2.0;
                let dy = (y as f32 + 0.5 - self.top as f32 - ry) / ry;
                let dx = (x as f32 + 0.5 - self.left as f32 - rx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Bounding boxes separated by at least `gap` pixels.
    fn separated(&self, other: &Region, gap: usize) -> bool {
        self.top >= other.top + other.height + gap
            || other.top >= self.top + self.height + gap
            || self.left >= other.left + other.width + gap
            || other.left >= self.left + self.width + gap
    }
}

struct Texture {
    waves: Vec<(f32, f32, f32, f32)>,
    blocks: Vec<(usize, usize, usize, usize, f32)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let waves = (0..6)
            .map(|_| {
                let freq = rng.random_range(0.08..0.6f32);
                let angle = rng.random_range(0.0..TAU);
                let phase = rng.random_range(0.0..TAU);
                let amp = rng.random_range(0.3..1.0f32);
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect();
        let blocks = (0..4)
            .map(|_| {
                let bh = rng.random_range(1..=h.max(2) / 2);
                let bw = rng.random_range(1..=w.max(2) / 2);
                let top = rng.random_range(0..h);
                let left = rng.random_range(0..w);
                (top, left, bh, bw, rng.random_range(-0.6..0.6f32))
            })
            .collect();
        Self { waves, blocks }
    }

    /// Texture luminance, roughly in [0, 1].
    fn at(&self, y: usize, x: usize) -> f32 {
        let (fy, fx) = (y as f32, x as f32);
        let total: f32 = self.waves.iter().map(|&(ky, kx, p, a)| a * (ky * fy + kx * fx + p).sin()).sum();
        let norm: f32 = self.waves.iter().map(|w| w.3).sum();
        let mut v = 0.5 + 0.35 * total / norm;
        for &(t, l, bh, bw, delta) in &self.blocks {
            if y >= t && y < t + bh && x >= l && x < l + bw {
                v += 0.3 * delta;
            }
        }
        v.clamp(0.0, 1.0)
    }
}

fn place_regions(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Vec<Region> {
    let mut regions: Vec<Region> = Vec::with_capacity(n);
    let (min_h, min_w) = ((h / 5).max(2), (w / 5).max(2));
    let (max_h, max_w) = ((h / 2).max(min_h), (w / 2).max(min_w));
    for _ in 0..n {
        for _attempt in 0..200 {
            let rh = rng.random_range(min_h..=max_h).min(h);
            let rw = rng.random_range(min_w..=max_w).min(w);
            let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
            let candidate = Region {
                top: rng.random_range(0..=h - rh),
                left: rng.random_range(0..=w - rw),
                height: rh,
                width: rw,
                shape,
            };
            if regions.iter().all(|r| candidate.separated(r, 2)) {
                regions.push(candidate);
                break;
            }
        }
    }
    regions
}

/// Generates one `(height, width)` scene with up to `n_glass_regions` disjoint glass regions.
///
/// Regions are rejection-sampled to keep a two-pixel gap between their
/// bounding boxes; on a crowded canvas fewer regions than requested may fit.
pub fn synth_scene(seed: u64, size: (usize, usize), n_glass_regions: usize) -> RgbtSample {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Texture::new(&mut rng, h, w);
    let tint = [
        rng.random_range(0.6..1.0f32),
        rng.random_range(0.6..1.0f32),
        rng.random_range(0.6..1.0f32),
    ];
    let regions = place_regions(&mut rng, h, w, n_glass_regions);
    let mask = BinaryMask::from_fn(h, w, |y, x| regions.iter().any(|r| r.contains(y, x)));

    let ambient = rng.random_range(15.0..25.0f32);
    let span = rng.random_range(6.0..12.0f32);
    // Panes share one apparent temperature; each gets its own gentle gradient.
    let pane_temp = ambient + rng.random_range(-0.2..0.8f32) * span;
    let panes: Vec<(f32, f32, f32)> = regions
        .iter()
        .map(|_| {
            (
                pane_temp,
                rng.random_range(-0.02..0.02f32),
                rng.random_range(-0.02..0.02f32),
            )
        })
        .collect();

    let mut rgb = Image::filled(h, w, 3, 0.0);
    let mut raw = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let lum = texture.at(y, x);
            for (c, t) in tint.iter().enumerate() {
                let grain = rng.random_range(-0.03..0.03f32);
                rgb.set(y, x, c, (lum * t + grain).clamp(0.0, 1.0));
            }
            let pane = regions.iter().position(|r| r.contains(y, x));
            let temp = match pane {
                Some(i) => {
                    let (base, gy, gx) = panes[i];
                    let r = &regions[i];
                    base + gy * (y - r.top) as f32 + gx * (x - r.left) as f32
                        + rng.random_range(-0.02..0.02f32)
                }
                None => ambient + span * lum + rng.random_range(-0.3..0.3f32),
            };
            raw.push(temp);
        }
    }
    let raw = RawThermal::new(h, w, raw).expect("dimensions match");
    let thermal = normalize_thermal(&raw).expect("finite synthetic readings");
    let meta = SampleMeta {
        source: format!("synth-{seed}"),
        scene: "synthetic".into(),
        area_ratio: Some(mask.area_ratio()),
    };
    RgbtSample::new(rgb, thermal, Some(mask), meta).expect("consistent synthetic sample")
}

/// `count` scenes with seeds `base_seed..base_seed + count`; every fourth scene has no glass.
pub fn synth_dataset(base_seed: u64, count: usize, size: (usize, usize), max_regions: usize) -> Vec<RgbtSample> {
    (0..count as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let n = if i % 4 == 3 { 0 } else { 1 + (seed as usize % max_regions.max(1)) };
            synth_scene(seed, size, n)
        })
        .collect()
}
