//! Full segmentation network.
//!
//! Parameter name schema:
//! `encoder_rgb.{stem,stage1..4}.*`, `encoder_thermal.*`, `proj_rgb.*`,
//! `proj_thermal.*`, `mfm.iter{i}.{trans_r,trans_t,trans_rt,trans_w,linear_w}.*`
//! (or `fusion.*` for the convolutional baselines), `decoder.block{1..4}.*`
//! and `head.*`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{GlassError, Result};
use crate::nnet::backbone::{load_pretrained, pretrained_file_name, Backbone};
use crate::nnet::config::{BackboneKind, InputKind, ModelConfig};
use crate::nnet::decoder::{DecoderBlock, Streams};
use crate::nnet::feature::FeatureVolume;
use crate::nnet::fusion::SimpleFusion;
use crate::nnet::layers::{resize_bilinear, sigmoid, Conv2d, ConvSpec, ForwardCtx};
use crate::nnet::mfm::{FusionState, Mfm, ResidualMode, SingleStreamBridge, TransformerSpec};
use crate::nnet::params::{Init, ParamScope, ParamStore};
use crate::nnet::posenc::positional_encoding_nchw;

/// Network input. Single-modality variants accept exactly one image.
#[derive(Debug, Clone)]
pub enum ModelInput {
    /// `B × 3 × H × W` colour and `B × 1 × H × W` thermal.
    Rgbt { rgb: Tensor, thermal: Tensor },
    Rgb(Tensor),
    Thermal(Tensor),
}

impl ModelInput {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(match self {
            Self::Rgbt { rgb, .. } | Self::Rgb(rgb) => rgb.dims4()?,
            Self::Thermal(t) => t.dims4()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    /// `B × 1 × H × W` in (0, 1).
    pub probability: Tensor,
    pub logits: Tensor,
}

/// Intermediate values exposed for inspection.
#[derive(Debug, Clone, Default)]
pub struct ModelTrace {
    pub fusion_states: Vec<FusionState>,
    /// `(w_r, w_t)` of each decoder block, coarsest first.
    pub decoder_weights: Vec<(Option<Tensor>, Option<Tensor>)>,
}

#[derive(Debug, Clone)]
enum Bridge {
    Mfm(Mfm),
    Simple(SimpleFusion),
    Single(SingleStreamBridge),
}

#[derive(Debug, Clone)]
struct Encoder {
    backbone: Backbone,
    proj: Conv2d,
}

impl Encoder {
    fn new(scope: &ParamScope, proj_scope: &ParamScope, cfg: &ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(scope, cfg.backbone_kind, cfg.tiny_widths)?;
        let top = backbone.channels()[3];
        let proj = Conv2d::new(
            proj_scope,
            ConvSpec::new(top, cfg.channels, 1).with_bias(),
            Init::FanInUniform { fan_in: top },
        )?;
        Ok(Self { backbone, proj })
    }

    /// Pyramid plus the projected, position-encoded bottleneck.
    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<(Vec<Tensor>, Tensor)> {
        let pyramid = self.backbone.forward(x, ctx)?;
        let p = self.proj.forward(&pyramid[3])?;
        let (_, c, h, w) = p.dims4()?;
        let pe = positional_encoding_nchw(h, w, c, p.dtype(), p.device())?;
        Ok((pyramid, p.broadcast_add(&pe)?))
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationModel {
    config: ModelConfig,
    store: ParamStore,
    encoder_rgb: Option<Encoder>,
    encoder_thermal: Option<Encoder>,
    bridge: Bridge,
    blocks: Vec<DecoderBlock>,
    head: Conv2d,
}

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(FeatureVolume::from_nchw(x)?.to_tokens()?.tensor().clone())
}

impl SegmentationModel {
    /// Builds the network with freshly initialized parameters.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(config, ParamStore::new(seed, dtype, device.clone()))
    }

    /// Builds a model for inference only; see [`ParamStore::inference`].
    pub fn for_inference(config: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(config, ParamStore::inference(dtype, device.clone()))
    }

    fn build(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        let input = config.input_kind;
        let slot_r = input.is_two_stream() || input == InputKind::RgbOnly;
        let slot_t = input.is_two_stream() || input == InputKind::ThermalOnly;
        let encoder_rgb = slot_r
            .then(|| Encoder::new(&root.pp("encoder_rgb"), &root.pp("proj_rgb"), config))
            .transpose()?;
        let encoder_thermal = slot_t
            .then(|| Encoder::new(&root.pp("encoder_thermal"), &root.pp("proj_thermal"), config))
            .transpose()?;

        let spec = TransformerSpec {
            dim: config.channels,
            heads: config.heads,
            ffn_dim: config.ffn_dim,
            dropout: config.dropout,
        };
        let bridge = if !input.is_two_stream() {
            let stream = if slot_r { "trans_r" } else { "trans_t" };
            Bridge::Single(SingleStreamBridge::new(&root.pp("mfm"), spec, config.mfm_iterations, stream)?)
        } else if let Some(mode) = ResidualMode::from_fusion(config.fusion_kind) {
            Bridge::Mfm(Mfm::new(&root.pp("mfm"), spec, mode, config.mfm_iterations)?)
        } else {
            Bridge::Simple(SimpleFusion::new(&root.pp("fusion"), config.fusion_kind, config.channels)?)
        };

        let channels = encoder_rgb
            .as_ref()
            .or(encoder_thermal.as_ref())
            .map(|e| e.backbone.channels())
            .expect("at least one encoder");
        let streams = Streams {
            rgb: slot_r,
            thermal: slot_t,
        };
        let dec = root.pp("decoder");
        let mut blocks = Vec::with_capacity(4);
        let mut in_w = config.channels;
        for (k, &out_w) in config.decoder_widths.iter().enumerate() {
            let skip = channels[3 - k];
            blocks.push(DecoderBlock::new(
                &dec.pp(format!("block{}", k + 1)),
                config.decoder_kind,
                streams,
                skip,
                in_w,
                out_w,
            )?);
            in_w = out_w;
        }
        let head = Conv2d::new(
            &root.pp("head"),
            ConvSpec::new(in_w, 1, 3).with_bias(),
            Init::FanInUniform { fan_in: 9 * in_w },
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder_rgb,
            encoder_thermal,
            bridge,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Loads ImageNet weights for every encoder from `cache_dir`.
    pub fn load_pretrained(&self, cache_dir: &Path) -> Result<usize> {
        let Some(file) = pretrained_file_name(self.config.backbone_kind) else {
            return Err(GlassError::Config(format!(
                "no pretrained weights exist for backbone {}",
                self.config.backbone_kind
            )));
        };
        let mut n = 0;
        for (enc, prefix) in [(&self.encoder_rgb, "encoder_rgb"), (&self.encoder_thermal, "encoder_thermal")] {
            if enc.is_some() {
                n += load_pretrained(&self.store, prefix, &cache_dir.join(file))?;
            }
        }
        Ok(n)
    }

    /// Copies every RGB-side parameter onto its thermal-side counterpart.
    pub fn tie_streams(&self) -> Result<()> {
        let swaps = [
            ("encoder_rgb.", "encoder_thermal."),
            ("proj_rgb.", "proj_thermal."),
            (".trans_r.", ".trans_t."),
            (".lateral_r.", ".lateral_t."),
            (".att_r.", ".att_t."),
            (".merge_r.", ".merge_t."),
        ];
        for (name, var) in self.store.all() {
            for (from, to) in swaps {
                if name.contains(from) {
                    let target = name.replacen(from, to, 1);
                    if let Some(t) = self.store.get(&target) {
                        t.set(var.as_tensor())?;
                    }
                }
            }
        }
        Ok(())
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(GlassError::invalid(format!(
                "input {h}x{w} is not divisible by {m}"
            )));
        }
        Ok(())
    }

    fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
        let c = x.dims4()?.1;
        if c != expected {
            return Err(GlassError::shape(format!("{what} input has {c} channels, expected {expected}")));
        }
        Ok(())
    }

    pub fn forward(&self, input: &ModelInput, ctx: &ForwardCtx) -> Result<SegmentationOutput> {
        Ok(self.forward_traced(input, ctx)?.0)
    }

    pub fn forward_traced(&self, input: &ModelInput, ctx: &ForwardCtx) -> Result<(SegmentationOutput, ModelTrace)> {
        let thermal3 = |t: &Tensor| -> Result<Tensor> {
            Self::check_channels(t, 1, "thermal")?;
            Ok(t.repeat((1, 3, 1, 1))?)
        };
        let rgb3 = |t: &Tensor| -> Result<Tensor> {
            Self::check_channels(t, 3, "rgb")?;
            Ok(t.clone())
        };
        let kind = self.config.input_kind;
        let (a, b) = match (kind, input) {
            (InputKind::Rgbt, ModelInput::Rgbt { rgb, thermal }) => {
                if rgb.dims()[2..] != thermal.dims()[2..] || rgb.dims()[0] != thermal.dims()[0] {
                    return Err(GlassError::shape("rgb and thermal sizes differ"));
                }
                (Some(rgb3(rgb)?), Some(thermal3(thermal)?))
            }
            (InputKind::RgbOnly, ModelInput::Rgb(rgb)) => (Some(rgb3(rgb)?), None),
            (InputKind::ThermalOnly, ModelInput::Thermal(t)) => (None, Some(thermal3(t)?)),
            (InputKind::DualRgb, ModelInput::Rgb(rgb)) => {
                let x = rgb3(rgb)?;
                (Some(x.clone()), Some(x))
            }
            (InputKind::DualThermal, ModelInput::Thermal(t)) => {
                let x = thermal3(t)?;
                (Some(x.clone()), Some(x))
            }
            (k, _) => {
                return Err(GlassError::invalid(format!("the {k} variant does not accept this input")))
            }
        };
        let (_, _, h, w) = input.dims()?;
        self.check_size(h, w)?;
        self.run(a.as_ref(), b.as_ref(), (h, w), ctx)
    }

    /// Feeds two 3-channel images straight into the two encoder slots.
    pub fn forward_streams(&self, slot_a: &Tensor, slot_b: &Tensor, ctx: &ForwardCtx) -> Result<SegmentationOutput> {
        if !self.config.input_kind.is_two_stream() {
            return Err(GlassError::invalid("forward_streams needs a two-stream variant"));
        }
        Self::check_channels(slot_a, 3, "slot a")?;
        Self::check_channels(slot_b, 3, "slot b")?;
        let (_, _, h, w) = slot_a.dims4()?;
        if slot_b.dims4()?.2 != h || slot_b.dims4()?.3 != w {
            return Err(GlassError::shape("encoder slots differ in size"));
        }
        self.check_size(h, w)?;
        Ok(self.run(Some(slot_a), Some(slot_b), (h, w), ctx)?.0)
    }

    fn run(
        &self,
        rgb: Option<&Tensor>,
        thermal: Option<&Tensor>,
        (h, w): (usize, usize),
        ctx: &ForwardCtx,
    ) -> Result<(SegmentationOutput, ModelTrace)> {
        let enc = |e: &Option<Encoder>, x: Option<&Tensor>| -> Result<Option<(Vec<Tensor>, Tensor)>> {
            match (e, x) {
                (Some(e), Some(x)) => Ok(Some(e.forward(x, ctx)?)),
                _ => Ok(None),
            }
        };
        let er = enc(&self.encoder_rgb, rgb)?;
        let et = enc(&self.encoder_thermal, thermal)?;
        let mut trace = ModelTrace::default();

        let mut d = match (&self.bridge, &er, &et) {
            (Bridge::Mfm(mfm), Some((_, fr)), Some((_, ft))) => {
                let (fused, states) = mfm.forward(&FeatureVolume::from_nchw(fr)?, &FeatureVolume::from_nchw(ft)?, ctx)?;
                trace.fusion_states = states;
                fused.to_nchw()?
            }
            (Bridge::Simple(f), Some((_, fr)), Some((_, ft))) => f.forward(fr, ft, ctx)?,
            (Bridge::Single(s), _, _) => {
                let f = er.as_ref().or(et.as_ref()).map(|(_, f)| f).expect("one encoder");
                let (_, _, fh, fw) = f.dims4()?;
                let out = s.forward_tokens(&to_tokens(f)?, ctx)?;
                FeatureVolume::from_tokens(out, fh, fw)?.to_nchw()?
            }
            _ => unreachable!("bridge matches the encoders"),
        };

        for (k, block) in self.blocks.iter().enumerate() {
            let skip_r = er.as_ref().map(|(p, _)| &p[3 - k]);
            let skip_t = et.as_ref().map(|(p, _)| &p[3 - k]);
            let out = block.forward(skip_r, skip_t, &d, ctx)?;
            trace.decoder_weights.push((out.w_r, out.w_t));
            d = out.output;
        }
        let logits = resize_bilinear(&self.head.forward(&d)?, h, w)?;
        let probability = sigmoid(&logits)?;
        Ok((SegmentationOutput { probability, logits }, trace))
    }
}

/// Trainable parameter count of `config` without allocating random weights.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    Ok(SegmentationModel::build(config, ParamStore::zeroed(DType::F32, Device::Cpu))?.parameter_count())
}

/// Whether `kind` has downloadable ImageNet weights.
pub fn has_pretrained_weights(kind: BackboneKind) -> bool {
    pretrained_file_name(kind).is_some()
}
