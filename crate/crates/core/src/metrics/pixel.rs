//! Per-image metrics.

use serde::{Deserialize, Serialize};

use crate::datakit::{BinaryMask, Image};
use crate::error::{GlassError, Result};

/// Threshold applied to probabilities before the binary metrics.
pub const BINARY_THRESHOLD: f32 = 0.5;
/// Weight of precision in the F-measure.
pub const DEFAULT_BETA2: f64 = 0.3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `100 · tp / (tp + fp + fn)`, or `None` when the union is empty.
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| 100.0 * self.tp as f64 / union as f64)
    }

    /// Balanced error rate in percent. A class absent from the ground
    /// truth contributes no term; the other then carries full weight.
    pub fn ber(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        let terms: Vec<f64> = [(self.tp, pos), (self.tn, neg)]
            .into_iter()
            .filter(|&(_, d)| d > 0)
            .map(|(n, d)| n as f64 / d as f64)
            .collect();
        (!terms.is_empty()).then(|| 100.0 * (1.0 - terms.iter().sum::<f64>() / terms.len() as f64))
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(GlassError::shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

fn probabilities(pred: &Image) -> Result<&[f32]> {
    if pred.channels() != 1 {
        return Err(GlassError::invalid(format!(
            "prediction must be single-channel, got {} channels",
            pred.channels()
        )));
    }
    Ok(pred.data())
}

pub fn binarize(pred: &Image) -> BinaryMask {
    BinaryMask::threshold(pred, BINARY_THRESHOLD)
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    same_dims(pred.dims(), gt.dims())?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Mean absolute difference of two equally sized value slices.
pub fn mean_absolute_error(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GlassError::shape(format!("cannot compare {} and {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64)
}

/// MAE of continuous probabilities against the binary ground truth.
pub fn mae(pred: &Image, gt: &BinaryMask) -> Result<f64> {
    same_dims(pred.dims(), gt.dims())?;
    let g: Vec<f32> = gt.data().iter().map(|&v| v as f32).collect();
    mean_absolute_error(probabilities(pred)?, &g)
}

fn require_foreground(gt: &BinaryMask, what: &str) -> Result<()> {
    if gt.is_empty() {
        return Err(GlassError::invalid(format!("{what} needs a ground truth with foreground")));
    }
    Ok(())
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    require_foreground(gt, "IOU")?;
    Ok(confusion(pred, gt)?.iou().expect("non-empty union"))
}

/// IOU of the inverted masks; meant for images without glass.
pub fn iou_star(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    iou(&pred.invert(), &gt.invert())
}

pub fn ber(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(confusion(pred, gt)?.ber().expect("non-empty mask"))
}

/// Index of the largest threshold `k/255`, `k ∈ 0..=254`, that `p` exceeds.
fn top_threshold(p: f64) -> Option<usize> {
    let below = |k: usize| (k as f64) / 255.0 < p;
    if !below(0) {
        return None;
    }
    let mut k = ((p * 255.0).floor().max(0.0) as usize).min(254);
    while k > 0 && !below(k) {
        k -= 1;
    }
    while k < 254 && below(k + 1) {
        k += 1;
    }
    Some(k)
}

/// Maximum F-measure over thresholds `t ∈ {0, 1/255, …, 254/255}`,
/// counting a pixel as positive when `p > t`.
pub fn max_f_measure(pred: &Image, gt: &BinaryMask, beta2: f64) -> Result<f64> {
    same_dims(pred.dims(), gt.dims())?;
    let probs = probabilities(pred)?;
    // Pixels whose top threshold is k are positive for thresholds 0..=k.
    let mut hist_pos = [0u64; 255];
    let mut hist_all = [0u64; 255];
    for (&p, &g) in probs.iter().zip(gt.data()) {
        if let Some(k) = top_threshold(p as f64) {
            hist_all[k] += 1;
            if g == 1 {
                hist_pos[k] += 1;
            }
        }
    }
    let positives = gt.count_foreground() as f64;
    let (mut tp, mut predicted) = (0u64, 0u64);
    let mut best = 0.0f64;
    for k in (0..255).rev() {
        tp += hist_pos[k];
        predicted += hist_all[k];
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if positives > 0.0 { tp as f64 / positives } else { 0.0 };
        let denom = beta2 * precision + recall;
        let f = if denom > 0.0 { (1.0 + beta2) * precision * recall / denom } else { 0.0 };
        best = best.max(f);
    }
    Ok(best)
}
