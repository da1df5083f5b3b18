//! Encoder backbones producing a four-stage feature pyramid.
//!
//! Residual networks use torchvision's layout and parameter names, with
//! `stem.*` for the input convolution and `stage{1..4}.*` for `layer{1..4}.*`,
//! so ImageNet weights map over one-to-one.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{GlassError, Result};
use crate::nnet::config::BackboneKind;
use crate::nnet::layers::{BatchNorm2d, Conv2d, ConvBnRelu, ConvSpec, ForwardCtx};
use crate::nnet::params::{Init, ParamScope, ParamStore};

fn conv(scope: &ParamScope, spec: ConvSpec) -> Result<Conv2d> {
    let fan_in = spec.in_ch * spec.kernel * spec.kernel;
    Conv2d::new(scope, spec, Init::HeUniform { fan_in })
}

#[derive(Debug, Clone)]
struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Downsample {
    fn new(scope: &ParamScope, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: conv(&scope.pp("0"), ConvSpec::new(in_ch, out_ch, 1).stride(stride))?,
            bn: BatchNorm2d::new(&scope.pp("1"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, ctx)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    downsample: Option<Downsample>,
}

impl ResidualBlock {
    fn basic(scope: &ParamScope, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            convs: vec![
                (
                    conv(&scope.pp("conv1"), ConvSpec::new(in_ch, out_ch, 3).stride(stride))?,
                    BatchNorm2d::new(&scope.pp("bn1"), out_ch)?,
                ),
                (
                    conv(&scope.pp("conv2"), ConvSpec::new(out_ch, out_ch, 3))?,
                    BatchNorm2d::new(&scope.pp("bn2"), out_ch)?,
                ),
            ],
            downsample: (stride != 1 || in_ch != out_ch)
                .then(|| Downsample::new(&scope.pp("downsample"), in_ch, out_ch, stride))
                .transpose()?,
        })
    }

    fn bottleneck(scope: &ParamScope, in_ch: usize, width: usize, stride: usize) -> Result<Self> {
        let out_ch = 4 * width;
        Ok(Self {
            convs: vec![
                (
                    conv(&scope.pp("conv1"), ConvSpec::new(in_ch, width, 1))?,
                    BatchNorm2d::new(&scope.pp("bn1"), width)?,
                ),
                (
                    conv(&scope.pp("conv2"), ConvSpec::new(width, width, 3).stride(stride))?,
                    BatchNorm2d::new(&scope.pp("bn2"), width)?,
                ),
                (
                    conv(&scope.pp("conv3"), ConvSpec::new(width, out_ch, 1))?,
                    BatchNorm2d::new(&scope.pp("bn3"), out_ch)?,
                ),
            ],
            downsample: (stride != 1 || in_ch != out_ch)
                .then(|| Downsample::new(&scope.pp("downsample"), in_ch, out_ch, stride))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut y = x.clone();
        let last = self.convs.len() - 1;
        for (i, (c, bn)) in self.convs.iter().enumerate() {
            y = bn.forward(&c.forward(&y)?, ctx)?;
            if i != last {
                y = y.relu()?;
            }
        }
        let skip = match &self.downsample {
            Some(d) => d.forward(x, ctx)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// 3×3 max pooling, stride 2, padding 1, on non-negative (post-ReLU) input.
///
/// Zero padding equals `-inf` padding here because inputs are non-negative.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut m: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let s = p.narrow(2, dy, h)?.narrow(3, dx, w)?;
            m = Some(match m {
                None => s,
                Some(acc) => acc.maximum(&s)?,
            });
        }
    }
    let m = m.unwrap();
    let rows: Vec<u32> = (0..h as u32).step_by(2).collect();
    let cols: Vec<u32> = (0..w as u32).step_by(2).collect();
    let rows = Tensor::new(rows.as_slice(), x.device())?;
    let cols = Tensor::new(cols.as_slice(), x.device())?;
    Ok(m.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

#[derive(Debug, Clone)]
pub struct ResNet {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<ResidualBlock>>,
    channels: [usize; 4],
}

impl ResNet {
    pub fn new(scope: &ParamScope, kind: BackboneKind) -> Result<Self> {
        let (bottleneck, depths) = match kind {
            BackboneKind::Residual18 => (false, [2, 2, 2, 2]),
            BackboneKind::Residual34 => (false, [3, 4, 6, 3]),
            BackboneKind::Residual50 => (true, [3, 4, 6, 3]),
            BackboneKind::Residual101 => (true, [3, 4, 23, 3]),
            BackboneKind::TinyTest => return Err(GlassError::Config("tiny-test is not a residual backbone".into())),
        };
        let stem = scope.pp("stem");
        let stem_conv = conv(&stem.pp("conv1"), ConvSpec::new(3, 64, 7).stride(2))?;
        let stem_bn = BatchNorm2d::new(&stem.pp("bn1"), 64)?;
        let widths = [64, 128, 256, 512];
        let expansion = if bottleneck { 4 } else { 1 };
        let mut in_ch = 64;
        let mut stages = Vec::with_capacity(4);
        for (s, (&width, &depth)) in widths.iter().zip(&depths).enumerate() {
            let stage = scope.pp(format!("stage{}", s + 1));
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let bs = stage.pp(b.to_string());
                blocks.push(if bottleneck {
                    ResidualBlock::bottleneck(&bs, in_ch, width, stride)?
                } else {
                    ResidualBlock::basic(&bs, in_ch, width, stride)?
                });
                in_ch = width * expansion;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem_conv,
            stem_bn,
            stages,
            channels: widths.map(|w| w * expansion),
        })
    }

    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        let y = self.stem_bn.forward(&self.stem_conv.forward(x)?, ctx)?.relu()?;
        let mut y = max_pool_3x3_s2(&y)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, ctx)?;
            }
            out.push(y.clone());
        }
        Ok(out)
    }
}

/// Four stride-2 stages of two 3×3 conv-bn-relu layers each.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    stages: Vec<[ConvBnRelu; 2]>,
    channels: [usize; 4],
}

impl TinyBackbone {
    pub fn new(scope: &ParamScope, widths: [usize; 4]) -> Result<Self> {
        let mut in_ch = 3;
        let mut stages = Vec::with_capacity(4);
        for (s, &w) in widths.iter().enumerate() {
            let stage = scope.pp(format!("stage{}", s + 1));
            stages.push([
                ConvBnRelu::new(&stage.pp("0"), ConvSpec::new(in_ch, w, 3).stride(2))?,
                ConvBnRelu::new(&stage.pp("1"), ConvSpec::new(w, w, 3))?,
            ]);
            in_ch = w;
        }
        Ok(Self { stages, channels: widths })
    }

    fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        let mut y = x.clone();
        let mut out = Vec::with_capacity(4);
        for [a, b] in &self.stages {
            y = b.forward(&a.forward(&y, ctx)?, ctx)?;
            out.push(y.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Residual(ResNet),
    Tiny(TinyBackbone),
}

impl Backbone {
    pub fn new(scope: &ParamScope, kind: BackboneKind, tiny_widths: [usize; 4]) -> Result<Self> {
        Ok(match kind {
            BackboneKind::TinyTest => Self::Tiny(TinyBackbone::new(scope, tiny_widths)?),
            other => Self::Residual(ResNet::new(scope, other)?),
        })
    }

    /// Channel count of each pyramid stage.
    pub fn channels(&self) -> [usize; 4] {
        match self {
            Self::Residual(r) => r.channels,
            Self::Tiny(t) => t.channels,
        }
    }

    /// `B × 3 × H × W` image to four feature maps, finest first.
    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        match self {
            Self::Residual(r) => r.forward(x, ctx),
            Self::Tiny(t) => t.forward(x, ctx),
        }
    }
}

/// File name of the ImageNet weights for `kind` inside the weight cache.
pub fn pretrained_file_name(kind: BackboneKind) -> Option<&'static str> {
    match kind {
        BackboneKind::Residual18 => Some("resnet18.safetensors"),
        BackboneKind::Residual34 => Some("resnet34.safetensors"),
        BackboneKind::Residual50 => Some("resnet50.safetensors"),
        BackboneKind::Residual101 => Some("resnet101.safetensors"),
        BackboneKind::TinyTest => None,
    }
}

/// Maps a torchvision key (`layer2.0.conv1.weight`) to the local name under `prefix`.
pub fn torchvision_to_local(prefix: &str, key: &str) -> Option<String> {
    if key.ends_with("num_batches_tracked") || key.starts_with("fc.") {
        return None;
    }
    let local = if let Some(rest) = key.strip_prefix("layer") {
        format!("stage{rest}")
    } else if key.starts_with("conv1.") || key.starts_with("bn1.") {
        format!("stem.{key}")
    } else {
        return None;
    };
    Some(format!("{prefix}.{local}"))
}

/// Loads torchvision-format backbone weights into every tensor under `prefix`.
pub fn load_pretrained(store: &ParamStore, prefix: &str, file: &Path) -> Result<usize> {
    if !file.exists() {
        return Err(GlassError::MissingFile(file.to_path_buf()));
    }
    let raw = candle_core::safetensors::load(file, &Device::Cpu)?;
    let mapped: BTreeMap<String, Tensor> = raw
        .into_iter()
        .filter_map(|(k, v)| torchvision_to_local(prefix, &k).map(|n| (n, v)))
        .collect();
    let expected = store.all().into_iter().filter(|(n, _)| n.starts_with(&format!("{prefix}.stem")) || n.starts_with(&format!("{prefix}.stage"))).count();
    let assigned = store.assign(&mapped, true)?;
    if assigned != expected {
        return Err(GlassError::Checkpoint(format!(
            "{} provides {assigned} of the {expected} backbone tensors under `{prefix}`",
            file.display()
        )));
    }
    Ok(assigned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn resnet_parameter_counts_match_torchvision() {
        // torchvision totals minus the 1000-way classifier.
        let cases = [
            (BackboneKind::Residual18, 11_689_512 - 513_000),
            (BackboneKind::Residual34, 21_797_672 - 513_000),
            (BackboneKind::Residual50, 25_557_032 - 2_049_000),
        ];
        for (kind, expected) in cases {
            let store = ParamStore::zeroed(DType::F32, Device::Cpu);
            ResNet::new(&store.root(), kind).unwrap();
            assert_eq!(store.parameter_count(), expected, "{kind}");
        }
    }

    #[test]
    fn resnet18_pyramid_shapes() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let net = Backbone::new(&store.root(), BackboneKind::Residual18, [1; 4]).unwrap();
        let x = Tensor::randn(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let feats = net.forward(&x, &ForwardCtx::eval()).unwrap();
        let dims: Vec<_> = feats.iter().map(|f| f.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 64, 16, 16], vec![1, 128, 8, 8], vec![1, 256, 4, 4], vec![1, 512, 2, 2]]);
        assert_eq!(net.channels(), [64, 128, 256, 512]);
    }

    #[test]
    fn tiny_pyramid_halves_each_stage() {
        let store = ParamStore::new(0, DType::F32, Device::Cpu);
        let net = Backbone::new(&store.root(), BackboneKind::TinyTest, [4, 8, 12, 16]).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let feats = net.forward(&x, &ForwardCtx::train(0)).unwrap();
        assert_eq!(feats[0].dims(), &[2, 4, 16, 16]);
        assert_eq!(feats[3].dims(), &[2, 16, 2, 2]);
    }

    #[test]
    fn max_pool_matches_direct_computation() {
        let x = Tensor::arange(0f32, 25.0, &Device::Cpu).unwrap().reshape((1, 1, 5, 5)).unwrap();
        let y = max_pool_3x3_s2(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // Windows centred on rows/cols 0, 2, 4.
        assert_eq!(y, vec![6.0, 8.0, 9.0, 16.0, 18.0, 19.0, 21.0, 23.0, 24.0]);
    }

    #[test]
    fn torchvision_names_map_to_local() {
        assert_eq!(torchvision_to_local("encoder_rgb", "layer3.1.bn2.running_var").as_deref(), Some("encoder_rgb.stage3.1.bn2.running_var"));
        assert_eq!(torchvision_to_local("e", "conv1.weight").as_deref(), Some("e.stem.conv1.weight"));
        assert_eq!(torchvision_to_local("e", "fc.weight"), None);
        assert_eq!(torchvision_to_local("e", "bn1.num_batches_tracked"), None);
    }
}
