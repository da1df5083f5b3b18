//! Dataset ingestion, thermal normalization, augmentation, synthetic scenes
//! and mask statistics.

pub mod augment;
pub mod components;
pub mod image;
pub mod io;
pub mod sample;
pub mod stats;
pub mod synth;
pub mod thermal;

pub use self::augment::{augment, AugmentConfig};
pub use self::components::{count_components, label_components, ComponentLabels};
pub use self::image::{BinaryMask, Image};
pub use self::io::{load_pair, Manifest, ManifestEntry};
pub use self::sample::{RgbtSample, SampleMeta};
pub use self::stats::{dataset_stats, dataset_stats_with, DatasetStats, StatsOptions};
pub use self::synth::{synth_dataset, synth_scene};
pub use self::thermal::{normalize_thermal, RawThermal};
