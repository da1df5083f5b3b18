//! Convolutional fusion baselines that replace the MFM at the bottleneck.
//!
//! All operate on `B × C × H × W` maps and return `B × C × H × W`.

use candle_core::Tensor;

use crate::error::{GlassError, Result};
use crate::nnet::config::FusionKind;
use crate::nnet::layers::{expand_channels, softmax_last, Conv2d, ConvBnRelu, ConvSpec, ForwardCtx};
use crate::nnet::params::{Init, ParamScope};

#[derive(Debug, Clone)]
pub enum SimpleFusion {
    /// `f_r + f_t`
    Sum,
    /// 1×1 convolution over the channel concatenation.
    Concat(ConvBnRelu),
    /// Per-pixel attention: a 1×1 convolution scores each modality and a
    /// softmax across the two scores weights the sum.
    PixelAttention(Conv2d),
    /// Affine modulation of the RGB feature by thermal-predicted scale and
    /// shift: `f_r ⊙ (1 + γ(f_t)) + β(f_t)`.
    Affine { scale: Conv2d, shift: Conv2d },
}

impl SimpleFusion {
    pub fn new(scope: &ParamScope, kind: FusionKind, channels: usize) -> Result<Self> {
        let c = channels;
        Ok(match kind {
            FusionKind::Sfs => Self::Sum,
            FusionKind::Sfc => Self::Concat(ConvBnRelu::new(&scope.pp("proj"), ConvSpec::new(2 * c, c, 1))?),
            FusionKind::Paf => Self::PixelAttention(Conv2d::new(
                &scope.pp("score"),
                ConvSpec::new(2 * c, 2, 1).with_bias(),
                Init::FanInUniform { fan_in: 2 * c },
            )?),
            FusionKind::At => Self::Affine {
                scale: Conv2d::new(
                    &scope.pp("scale"),
                    ConvSpec::new(c, c, 1).with_bias(),
                    Init::FanInUniform { fan_in: c },
                )?,
                shift: Conv2d::new(
                    &scope.pp("shift"),
                    ConvSpec::new(c, c, 1).with_bias(),
                    Init::FanInUniform { fan_in: c },
                )?,
            },
            other => {
                return Err(GlassError::Config(format!(
                    "{other} is a transformer fusion, not a convolutional one"
                )))
            }
        })
    }

    pub fn forward(&self, f_r: &Tensor, f_t: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        if f_r.dims() != f_t.dims() {
            return Err(GlassError::shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                f_r.dims(),
                f_t.dims()
            )));
        }
        match self {
            Self::Sum => Ok((f_r + f_t)?),
            Self::Concat(proj) => proj.forward(&Tensor::cat(&[f_r, f_t], 1)?, ctx),
            Self::PixelAttention(score) => {
                let s = score.forward(&Tensor::cat(&[f_r, f_t], 1)?)?;
                // Softmax over the modality axis, computed on the trailing dim.
                let a = softmax_last(&s.permute((0, 2, 3, 1))?)?.permute((0, 3, 1, 2))?;
                let a_r = a.narrow(1, 0, 1)?;
                let a_t = a.narrow(1, 1, 1)?;
                let c = f_r.dim(1)?;
                Ok(((f_r * expand_channels(&a_r, c)?)? + (f_t * expand_channels(&a_t, c)?)?)?)
            }
            Self::Affine { scale, shift } => {
                let gamma = scale.forward(f_t)?;
                let beta = shift.forward(f_t)?;
                Ok(((f_r * (gamma + 1.0)?)? + beta)?)
            }
        }
    }
}
