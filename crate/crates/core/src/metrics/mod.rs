//! Segmentation metrics for images with and without glass.

pub mod pixel;
pub mod report;

pub use pixel::{
    ber, binarize, confusion, iou, iou_star, mae, max_f_measure, mean_absolute_error, ConfusionCounts,
    BINARY_THRESHOLD, DEFAULT_BETA2,
};
pub use report::{evaluate_split, fpr, render_table, AllImages, EvalOptions, MetricsReport, WithGlass, WithoutGlass};
