//! Decoder blocks with convolutional spatial attention.
//!
//! A block receives skip features `e_r`, `e_t` from the matching encoder
//! stage (laterally projected to the running width) and the running feature
//! `d`. Each skip gets a single-channel attention map computed from its
//! concatenation with `d`, and the block emits
//! `w_r ⊗ e_r + w_t ⊗ e_t + d`, followed by a 3×3 convolution and 2× bilinear
//! upsampling.

use candle_core::Tensor;

use crate::error::{GlassError, Result};
use crate::nnet::config::DecoderKind;
use crate::nnet::layers::{constant_like, expand_channels, sigmoid, upsample2x, Conv2d, ConvBnRelu, ConvSpec, ForwardCtx};
use crate::nnet::params::{Init, ParamScope};

/// conv3×3-bn-relu, conv3×3-bn-relu, conv1×1, sigmoid over `concat(e, d)`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    c1: ConvBnRelu,
    c2: ConvBnRelu,
    c3: Conv2d,
}

impl SpatialAttention {
    pub fn new(scope: &ParamScope, channels: usize) -> Result<Self> {
        let c = channels;
        Ok(Self {
            c1: ConvBnRelu::new(&scope.pp("c1"), ConvSpec::new(2 * c, c, 3))?,
            c2: ConvBnRelu::new(&scope.pp("c2"), ConvSpec::new(c, c, 3))?,
            c3: Conv2d::new(&scope.pp("c3"), ConvSpec::new(c, 1, 1).with_bias(), Init::FanInUniform { fan_in: c })?,
        })
    }

    /// `B × 1 × H × W` weights in (0, 1).
    pub fn forward(&self, e: &Tensor, d: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let x = Tensor::cat(&[e, d], 1)?;
        let x = self.c2.forward(&self.c1.forward(&x, ctx)?, ctx)?;
        sigmoid(&self.c3.forward(&x)?)
    }
}

#[derive(Debug, Clone)]
enum Merge {
    Weighted {
        att_r: Option<SpatialAttention>,
        att_t: Option<SpatialAttention>,
    },
    Sum,
    Concat(ConvBnRelu),
}

/// Which skip streams a block consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub rgb: bool,
    pub thermal: bool,
}

impl Streams {
    fn count(self) -> usize {
        self.rgb as usize + self.thermal as usize
    }
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// `w_r ⊗ e_r + w_t ⊗ e_t + d` before the convolution and upsampling.
    pub merged: Tensor,
    /// Block output at twice the input resolution.
    pub output: Tensor,
    pub w_r: Option<Tensor>,
    pub w_t: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    lateral_r: Option<ConvBnRelu>,
    lateral_t: Option<ConvBnRelu>,
    merge: Merge,
    post: ConvBnRelu,
    width: usize,
}

impl DecoderBlock {
    /// `skip_ch`: encoder stage channels; `in_w`: width of `d`; `out_w`: output width.
    pub fn new(
        scope: &ParamScope,
        kind: DecoderKind,
        streams: Streams,
        skip_ch: usize,
        in_w: usize,
        out_w: usize,
    ) -> Result<Self> {
        let lateral = |name: &str| ConvBnRelu::new(&scope.pp(name), ConvSpec::new(skip_ch, in_w, 1));
        let merge = match kind {
            DecoderKind::Weighted => Merge::Weighted {
                att_r: streams.rgb.then(|| SpatialAttention::new(&scope.pp("att_r"), in_w)).transpose()?,
                att_t: streams.thermal.then(|| SpatialAttention::new(&scope.pp("att_t"), in_w)).transpose()?,
            },
            DecoderKind::Ds => Merge::Sum,
            DecoderKind::Dc => Merge::Concat(ConvBnRelu::new(
                &scope.pp("merge"),
                ConvSpec::new((streams.count() + 1) * in_w, in_w, 1),
            )?),
        };
        Ok(Self {
            lateral_r: streams.rgb.then(|| lateral("lateral_r")).transpose()?,
            lateral_t: streams.thermal.then(|| lateral("lateral_t")).transpose()?,
            merge,
            post: ConvBnRelu::new(&scope.pp("post"), ConvSpec::new(in_w, out_w, 3))?,
            width: in_w,
        })
    }

    fn project(lateral: &Option<ConvBnRelu>, e: Option<&Tensor>, d: &Tensor, ctx: &ForwardCtx, name: &str) -> Result<Option<Tensor>> {
        match (lateral, e) {
            (Some(l), Some(e)) => {
                let p = l.forward(e, ctx)?;
                if p.dims() != d.dims() {
                    return Err(GlassError::shape(format!(
                        "skip feature {name} {:?} does not match decoder feature {:?}",
                        p.dims(),
                        d.dims()
                    )));
                }
                Ok(Some(p))
            }
            (None, None) => Ok(None),
            (Some(_), None) => Err(GlassError::invalid(format!("decoder block expects skip feature {name}"))),
            (None, Some(_)) => Err(GlassError::invalid(format!("decoder block has no {name} stream"))),
        }
    }

    pub fn forward(&self, e_r: Option<&Tensor>, e_t: Option<&Tensor>, d: &Tensor, ctx: &ForwardCtx) -> Result<BlockOutput> {
        if d.dims()[1] != self.width {
            return Err(GlassError::shape(format!(
                "decoder block of width {} received {} channels",
                self.width,
                d.dims()[1]
            )));
        }
        let e_r = Self::project(&self.lateral_r, e_r, d, ctx, "e_r")?;
        let e_t = Self::project(&self.lateral_t, e_t, d, ctx, "e_t")?;
        let (mut w_r, mut w_t) = (None, None);
        let merged = match &self.merge {
            Merge::Weighted { att_r, att_t } => {
                let mut acc = d.clone();
                let weigh = |att: &Option<SpatialAttention>, e: &Option<Tensor>| -> Result<Option<Tensor>> {
                    match (att, e) {
                        (Some(a), Some(e)) => Ok(Some(match ctx.overrides.decoder {
                            Some(v) => constant_like(&e.narrow(1, 0, 1)?, v)?,
                            None => a.forward(e, d, ctx)?,
                        })),
                        _ => Ok(None),
                    }
                };
                w_r = weigh(att_r, &e_r)?;
                w_t = weigh(att_t, &e_t)?;
                for (w, e) in [(&w_r, &e_r), (&w_t, &e_t)] {
                    if let (Some(w), Some(e)) = (w, e) {
                        acc = (acc + (e * expand_channels(w, e.dim(1)?)?)?)?;
                    }
                }
                acc
            }
            Merge::Sum => {
                let mut acc = d.clone();
                for e in [&e_r, &e_t].into_iter().flatten() {
                    acc = (acc + e)?;
                }
                acc
            }
            Merge::Concat(proj) => {
                let mut parts: Vec<&Tensor> = [&e_r, &e_t].into_iter().flatten().collect();
                parts.push(d);
                proj.forward(&Tensor::cat(&parts, 1)?, ctx)?
            }
        };
        let output = upsample2x(&self.post.forward(&merged, ctx)?)?;
        Ok(BlockOutput {
            merged,
            output,
            w_r,
            w_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::layers::WeightOverrides;
    use crate::nnet::params::ParamStore;
    use candle_core::{DType, Device};

    const BOTH: Streams = Streams { rgb: true, thermal: true };

    fn feats(c: usize, hw: usize) -> (Tensor, Tensor, Tensor) {
        let r = || Tensor::randn(0f64, 1.0, (1, c, hw, hw), &Device::Cpu).unwrap();
        (r(), r(), r())
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap()
    }

    #[test]
    fn zero_weights_leave_d_untouched() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let block = DecoderBlock::new(&store.root(), DecoderKind::Weighted, BOTH, 8, 8, 4).unwrap();
        let (er, et, d) = feats(8, 16);
        let ctx = ForwardCtx::eval().with_overrides(WeightOverrides { fusion: None, decoder: Some(0.0) });
        let out = block.forward(Some(&er), Some(&et), &d, &ctx).unwrap();
        assert_eq!(max_diff(&out.merged, &d), 0.0);
        assert_eq!(out.output.dims(), &[1, 4, 32, 32]);
    }

    #[test]
    fn attention_weights_are_single_channel_and_open() {
        let store = ParamStore::new(3, DType::F64, Device::Cpu);
        let block = DecoderBlock::new(&store.root(), DecoderKind::Weighted, BOTH, 6, 8, 8).unwrap();
        let (er, et, d) = feats(8, 4);
        let er = er.narrow(1, 0, 6).unwrap();
        let et = et.narrow(1, 0, 6).unwrap();
        let out = block.forward(Some(&er), Some(&et), &d, &ForwardCtx::train(0)).unwrap();
        for w in [out.w_r.unwrap(), out.w_t.unwrap()] {
            assert_eq!(w.dims(), &[1, 1, 4, 4]);
            let v = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let block = DecoderBlock::new(&store.root(), DecoderKind::Ds, BOTH, 8, 8, 8).unwrap();
        let (er, _, d) = feats(8, 4);
        let (et, _, _) = feats(8, 8);
        assert!(block.forward(Some(&er), Some(&et), &d, &ForwardCtx::eval()).is_err());
    }

    #[test]
    fn single_stream_block() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let streams = Streams { rgb: false, thermal: true };
        for kind in DecoderKind::ALL {
            let block = DecoderBlock::new(&store.root().pp(kind.as_str()), *kind, streams, 8, 8, 8).unwrap();
            let (e, _, d) = feats(8, 4);
            let out = block.forward(None, Some(&e), &d, &ForwardCtx::eval()).unwrap();
            assert_eq!(out.output.dims(), &[1, 8, 8, 8]);
            assert!(block.forward(Some(&e), Some(&e), &d, &ForwardCtx::eval()).is_err());
        }
    }
}
