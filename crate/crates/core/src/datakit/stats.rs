use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datakit::components::count_components;
use crate::datakit::image::{BinaryMask, Image};
use crate::error::{GlassError, Result};

pub const DEFAULT_AREA_BINS: usize = 10;
pub const DEFAULT_LOCATION_RESOLUTION: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaHistogram {
    /// `bins + 1` ascending edges spanning `[0, 1]`; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl AreaHistogram {
    fn new(bins: usize) -> Self {
        Self {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
        }
    }

    pub fn bin_of(&self, ratio: f64) -> usize {
        let bins = self.counts.len();
        ((ratio * bins as f64).floor() as usize).min(bins - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub area_ratios: Vec<f64>,
    pub area_ratio_histogram: AreaHistogram,
    /// component count -> number of images.
    pub component_histogram: BTreeMap<usize, usize>,
    pub location_resolution: usize,
    /// Row-major `resolution × resolution` glass probability per pixel.
    pub location_probability: Vec<f32>,
}

impl DatasetStats {
    pub fn location_map(&self) -> Image {
        let r = self.location_resolution;
        Image::new(r, r, 1, self.location_probability.clone()).expect("square map")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StatsOptions {
    pub area_bins: usize,
    pub location_resolution: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            area_bins: DEFAULT_AREA_BINS,
            location_resolution: DEFAULT_LOCATION_RESOLUTION,
        }
    }
}

pub fn dataset_stats(masks: &[BinaryMask]) -> Result<DatasetStats> {
    dataset_stats_with(masks, StatsOptions::default())
}

pub fn dataset_stats_with(masks: &[BinaryMask], opts: StatsOptions) -> Result<DatasetStats> {
    if masks.is_empty() {
        return Err(GlassError::invalid("dataset statistics need at least one mask"));
    }
    if opts.area_bins == 0 || opts.location_resolution == 0 {
        return Err(GlassError::invalid("histogram bins and map resolution must be positive"));
    }
    let r = opts.location_resolution;
    let mut hist = AreaHistogram::new(opts.area_bins);
    let mut components = BTreeMap::new();
    let mut ratios = Vec::with_capacity(masks.len());
    let mut accum = vec![0u64; r * r];

    for mask in masks {
        let ratio = mask.area_ratio();
        ratios.push(ratio);
        let bin = hist.bin_of(ratio);
        hist.counts[bin] += 1;
        *components.entry(count_components(mask)).or_insert(0) += 1;
        let small = mask.resize_nearest(r, r);
        for (a, &v) in accum.iter_mut().zip(small.data()) {
            *a += v as u64;
        }
    }

    let n = masks.len() as f64;
    Ok(DatasetStats {
        n_images: masks.len(),
        area_ratios: ratios,
        area_ratio_histogram: hist,
        component_histogram: components,
        location_resolution: r,
        location_probability: accum.iter().map(|&c| (c as f64 / n) as f32).collect(),
    })
}
