//! Split-aware evaluation: images with glass get MAE, IOU, Fβ and BER,
//! images without glass get MAE, IOU* and the image-level false positive
//! rate. Per-image values are averaged over images.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::{BinaryMask, Image};
use crate::error::{GlassError, Result};
use crate::metrics::pixel::{ber, binarize, iou, iou_star, mae, max_f_measure, DEFAULT_BETA2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub beta2: f64,
    /// An image counts as a false positive when its predicted foreground
    /// fraction exceeds this.
    pub fpr_min_area: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beta2: DEFAULT_BETA2,
            fpr_min_area: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WithGlass {
    pub mae: f64,
    pub iou: f64,
    pub f_beta: f64,
    pub ber: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WithoutGlass {
    pub mae: f64,
    pub iou_star: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllImages {
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub with_glass: Option<WithGlass>,
    pub without_glass: Option<WithoutGlass>,
    pub all: AllImages,
    pub n_with: usize,
    pub n_without: usize,
}

/// Fraction of no-glass images whose binarized prediction has foreground
/// area above `min_area`.
pub fn fpr(predictions: &[BinaryMask], min_area: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(GlassError::invalid("FPR needs at least one image without glass"));
    }
    let hits = predictions.iter().filter(|p| p.area_ratio() > min_area).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn evaluate_split(predictions: &[Image], gts: &[BinaryMask], opts: &EvalOptions) -> Result<MetricsReport> {
    if predictions.len() != gts.len() {
        return Err(GlassError::invalid(format!(
            "{} predictions for {} ground-truth masks",
            predictions.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(GlassError::invalid("nothing to evaluate"));
    }
    let (mut w_mae, mut w_iou, mut w_f, mut w_ber) = (vec![], vec![], vec![], vec![]);
    let (mut n_mae, mut n_iou, mut n_bins) = (vec![], vec![], vec![]);
    let mut all = Vec::with_capacity(gts.len());
    for (pred, gt) in predictions.iter().zip(gts) {
        let m = mae(pred, gt)?;
        let bin = binarize(pred);
        all.push(m);
        if gt.is_empty() {
            n_mae.push(m);
            n_iou.push(iou_star(&bin, gt)?);
            n_bins.push(bin);
        } else {
            w_mae.push(m);
            w_iou.push(iou(&bin, gt)?);
            w_f.push(max_f_measure(pred, gt, opts.beta2)?);
            w_ber.push(ber(&bin, gt)?);
        }
    }
    let with_glass = (!w_mae.is_empty()).then(|| WithGlass {
        mae: mean(&w_mae),
        iou: mean(&w_iou),
        f_beta: mean(&w_f),
        ber: mean(&w_ber),
    });
    let without_glass = if n_mae.is_empty() {
        None
    } else {
        Some(WithoutGlass {
            mae: mean(&n_mae),
            iou_star: mean(&n_iou),
            fpr: fpr(&n_bins, opts.fpr_min_area)?,
        })
    };
    Ok(MetricsReport {
        with_glass,
        without_glass,
        all: AllImages { mae: mean(&all) },
        n_with: w_mae.len(),
        n_without: n_mae.len(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Fields in table order; `None` renders as "n/a".
    fn cells(&self) -> [Option<String>; 8] {
        let w = self.with_glass;
        let n = self.without_glass;
        [
            w.map(|w| format!("{:.3}", w.mae)),
            w.map(|w| format!("{:.2}", w.iou)),
            w.map(|w| format!("{:.3}", w.f_beta)),
            w.map(|w| format!("{:.3}", w.ber)),
            n.map(|n| format!("{:.3}", n.mae)),
            n.map(|n| format!("{:.2}", n.iou_star)),
            n.map(|n| format!("{:.3}", n.fpr)),
            Some(format!("{:.3}", self.all.mae)),
        ]
    }
}

/// Renders rows of `(name, report)` as a fixed-width comparison table.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:name_w$} | {:^31} | {:^23} | {:^7}",
        "",
        "Images with glass",
        "Images without glass",
        "All"
    );
    let _ = writeln!(
        out,
        "{:name_w$} | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7}",
        "Method", "MAE", "IOU", "F_beta", "BER", "MAE", "IOU*", "FPR", "MAE"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 78));
    for (name, report) in rows {
        let c = report.cells().map(|c| c.unwrap_or_else(|| "n/a".into()));
        let _ = writeln!(
            out,
            "{name:name_w$} | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7}",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]
        );
    }
    out
}
