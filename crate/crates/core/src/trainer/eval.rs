//! Inference at arbitrary resolution and split evaluation.

use std::borrow::Cow;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::datakit::{BinaryMask, Image, RgbtSample};
use crate::error::{GlassError, Result};
use crate::metrics::{evaluate_split, EvalOptions, MetricsReport};
use crate::nnet::{Checkpoint, ForwardCtx, InputKind, ModelInput, SegmentationModel};

/// Stacks images into a `B × C × H × W` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| GlassError::invalid("empty batch"))?;
    let (h, w) = first.dims();
    let c = first.channels();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dims() != (h, w) || img.channels() != c {
            return Err(GlassError::shape(format!(
                "batch mixes {}x{}x{} and {}x{}x{} images",
                h,
                w,
                c,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        data.extend(img.to_planar());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

pub fn masks_to_tensor(masks: &[&BinaryMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let images: Vec<Image> = masks.iter().map(|m| m.to_image()).collect();
    images_to_tensor(&images.iter().collect::<Vec<_>>(), dtype, device)
}

/// Builds the network input for `kind` from whichever modalities it needs.
pub fn model_input(kind: InputKind, rgb: Option<Tensor>, thermal: Option<Tensor>) -> Result<ModelInput> {
    let need = |t: Option<Tensor>, what: &str| {
        t.ok_or_else(|| GlassError::invalid(format!("the {kind} model needs a {what} image")))
    };
    Ok(match kind {
        InputKind::Rgbt => ModelInput::Rgbt {
            rgb: need(rgb, "rgb")?,
            thermal: need(thermal, "thermal")?,
        },
        InputKind::RgbOnly | InputKind::DualRgb => ModelInput::Rgb(need(rgb, "rgb")?),
        InputKind::ThermalOnly | InputKind::DualThermal => ModelInput::Thermal(need(thermal, "thermal")?),
    })
}

/// Nearest positive multiple of `m`.
pub fn round_to_multiple(x: usize, m: usize) -> usize {
    (((x as f64) / m as f64).round() as usize).max(1) * m
}

/// Converts a `1 × 1 × H × W` tensor to a single-channel image.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let (_, _, h, w) = t.dims4()?;
    let v = t.get(0)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Image::new(h, w, 1, v)
}

/// Glass probability at the resolution of the given images. The network
/// runs at the nearest size divisible by its stride and the prediction is
/// resampled back.
pub fn predict_probability(model: &SegmentationModel, rgb: Option<&Image>, thermal: Option<&Image>) -> Result<Image> {
    predict_frozen(&*frozen(model)?, rgb, thermal)
}

/// The model itself when its parameters are already detached, otherwise a
/// detached copy, so inference records no autograd graph.
fn frozen(model: &SegmentationModel) -> Result<Cow<'_, SegmentationModel>> {
    let store = model.store();
    if store.is_frozen() {
        return Ok(Cow::Borrowed(model));
    }
    Ok(Cow::Owned(
        Checkpoint::from_model(model)?.to_inference_model(store.dtype(), store.device())?,
    ))
}

fn predict_frozen(model: &SegmentationModel, rgb: Option<&Image>, thermal: Option<&Image>) -> Result<Image> {
    let kind = model.config().input_kind;
    let rgb = if kind.needs_rgb() { rgb } else { None };
    let thermal = if kind.needs_thermal() { thermal } else { None };
    let (h, w) = rgb
        .or(thermal)
        .map(|i| i.dims())
        .ok_or_else(|| GlassError::invalid(format!("the {kind} model needs an input image")))?;
    if let (Some(r), Some(t)) = (rgb, thermal) {
        if r.dims() != t.dims() {
            return Err(GlassError::shape("rgb and thermal images differ in size"));
        }
    }
    let m = model.config().size_multiple();
    let (nh, nw) = (round_to_multiple(h, m), round_to_multiple(w, m));
    let store = model.store();
    let prep = |img: &Image| images_to_tensor(&[&img.resize_bilinear(nh, nw)], store.dtype(), store.device());
    let input = model_input(kind, rgb.map(prep).transpose()?, thermal.map(prep).transpose()?)?;
    let out = model.forward(&input, &ForwardCtx::eval())?;
    Ok(tensor_to_image(&out.probability)?.resize_bilinear(h, w))
}

pub fn predict_samples(model: &SegmentationModel, samples: &[RgbtSample]) -> Result<Vec<Image>> {
    let model = frozen(model)?;
    samples
        .iter()
        .map(|s| predict_frozen(&model, Some(s.rgb()), Some(s.thermal())))
        .collect()
}

pub fn evaluate_model(model: &SegmentationModel, samples: &[RgbtSample], opts: &EvalOptions) -> Result<MetricsReport> {
    let gts = ground_truths(samples)?;
    evaluate_split(&predict_samples(model, samples)?, &gts, opts)
}

pub fn ground_truths(samples: &[RgbtSample]) -> Result<Vec<BinaryMask>> {
    samples
        .iter()
        .map(|s| {
            s.mask()
                .cloned()
                .ok_or_else(|| GlassError::invalid(format!("sample {} has no ground-truth mask", s.meta.source)))
        })
        .collect()
}

/// Rebuilds a CPU `f32` inference model from a checkpoint file.
pub fn load_model(path: &Path) -> Result<SegmentationModel> {
    Checkpoint::load(path)?.to_inference_model(DType::F32, &Device::Cpu)
}

pub fn evaluate_checkpoint(path: &Path, samples: &[RgbtSample], opts: &EvalOptions) -> Result<MetricsReport> {
    evaluate_model(&load_model(path)?, samples, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::synth_dataset;
    use crate::nnet::ModelConfig;

    #[test]
    fn rounding() {
        assert_eq!(round_to_multiple(480, 32), 480);
        assert_eq!(round_to_multiple(470, 32), 480);
        assert_eq!(round_to_multiple(10, 32), 32);
        assert_eq!(round_to_multiple(48, 32), 64);
    }

    #[test]
    fn untrained_model_report_is_finite_at_odd_sizes() {
        let model = SegmentationModel::new(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let samples = synth_dataset(3, 4, (40, 56), 2);
        let report = evaluate_model(&model, &samples, &EvalOptions::default()).unwrap();
        assert_eq!(report.n_with + report.n_without, 4);
        let json = report.to_json().unwrap();
        assert!(!json.contains("NaN") && !json.contains("inf"));
    }

    #[test]
    fn missing_modality_is_named() {
        let model = SegmentationModel::new(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let rgb = Image::filled(32, 32, 3, 0.5);
        let err = predict_probability(&model, Some(&rgb), None).unwrap_err().to_string();
        assert!(err.contains("thermal"), "{err}");
        let rgb_only = ModelConfig::tiny().with_input(InputKind::RgbOnly);
        let model = SegmentationModel::new(&rgb_only, 0, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(predict_probability(&model, Some(&rgb), None).unwrap().dims(), (32, 32));
    }
}
