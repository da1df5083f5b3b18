//! Binary cross-entropy in logit form.

use candle_core::{DType, Tensor};

use crate::error::{GlassError, Result};

/// Mean BCE between `sigmoid(logits)` and `target`, as
/// `max(x, 0) − x·g + ln(1 + e^{−|x|})`. The mean is accumulated in `f64`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(GlassError::shape(format!(
            "logits {:?} and target {:?} differ",
            logits.dims(),
            target.dims()
        )));
    }
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_pixel = ((logits.relu()? - (logits * target)?)? + softplus)?;
    let dtype = per_pixel.dtype();
    Ok(per_pixel.to_dtype(DType::F64)?.mean_all()?.to_dtype(dtype)?)
}

/// Probabilities are clamped this far from 0 and 1 before taking logits.
const PROB_EPS: f64 = 1e-12;

/// Mean BCE of probabilities against binary targets, evaluated through the
/// same logit form.
pub fn bce_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(GlassError::shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let mut total = 0.0;
    for (&p, &g) in pred.iter().zip(gt) {
        if !(0.0..=1.0).contains(&p) || !(g == 0.0 || g == 1.0) {
            return Err(GlassError::invalid(format!("invalid probability {p} or target {g}")));
        }
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let x = (p / (1.0 - p)).ln();
        total += x.max(0.0) - x * g + (-x.abs()).exp().ln_1p();
    }
    Ok(total / pred.len() as f64)
}
