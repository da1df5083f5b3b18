//! Multi-modal fusion module (MFM).
//!
//! Each iteration stacks the RGB and thermal token sets, mixes them with a
//! transformer layer into `f_rt`, derives one sigmoid weight per stacked
//! token, and hands the weighted halves of `f_rt` back to each stream as a
//! residual:
//!
//! ```text
//! f_rt  = trans_rt(stack(f_r, f_t))                      2HW × C
//! w     = sigmoid(linear_w(trans_w(f_rt)))               2HW × 1
//! f_r'  = trans_r(f_r) + (w ⊗ f_rt)[..HW]
//! f_t'  = trans_t(f_t) + (w ⊗ f_rt)[HW..]
//! ```
//!
//! The last iteration emits the fused feature `(w ⊗ f_rt)[..HW] + (w ⊗ f_rt)[HW..]`
//! instead of updating the streams, so it carries no `trans_r` / `trans_t`.

use candle_core::{Tensor, D};

use crate::error::{GlassError, Result};
use crate::nnet::config::FusionKind;
use crate::nnet::feature::FeatureVolume;
use crate::nnet::layers::{constant_like, sigmoid, ForwardCtx, Linear};
use crate::nnet::params::{Init, ParamScope};
use crate::nnet::transformer::TransformerLayer;

/// How the cross-modal feature is merged back into each stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// Sigmoid-weighted residual.
    Weighted,
    /// Weights discarded; halves of `f_rt` are added directly.
    DirectSum,
    /// Weights discarded; halves of `f_rt` are concatenated and projected back to C.
    DirectConcat,
}

impl ResidualMode {
    pub fn from_fusion(kind: FusionKind) -> Option<Self> {
        match kind {
            FusionKind::Mfm => Some(Self::Weighted),
            FusionKind::MfmDs => Some(Self::DirectSum),
            FusionKind::MfmDc => Some(Self::DirectConcat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerSpec {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl TransformerSpec {
    fn build(&self, scope: &ParamScope) -> Result<TransformerLayer> {
        TransformerLayer::new(scope, self.dim, self.heads, self.ffn_dim, self.dropout)
    }
}

/// Intermediate state of one iteration.
#[derive(Debug, Clone)]
pub struct FusionState {
    /// `B × 2HW × C`, RGB rows first.
    pub f_rt: Tensor,
    /// `B × 2HW × 1`; absent for the direct-sum and direct-concat modes.
    pub w: Option<Tensor>,
    /// `f_r` for the next iteration; absent after the last iteration.
    pub rgb_next: Option<Tensor>,
    pub thermal_next: Option<Tensor>,
}

impl FusionState {
    /// `w ⊗ f_rt`, or `f_rt` when there are no weights.
    fn weighted(&self) -> Result<Tensor> {
        match &self.w {
            Some(w) => Ok(self.f_rt.broadcast_mul(w)?),
            None => Ok(self.f_rt.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MfmBlock {
    trans_r: Option<TransformerLayer>,
    trans_t: Option<TransformerLayer>,
    trans_rt: TransformerLayer,
    trans_w: Option<TransformerLayer>,
    linear_w: Option<Linear>,
    merge_r: Option<Linear>,
    merge_t: Option<Linear>,
    merge_out: Option<Linear>,
    mode: ResidualMode,
}

impl MfmBlock {
    pub fn new(scope: &ParamScope, spec: TransformerSpec, mode: ResidualMode, last: bool) -> Result<Self> {
        let c = spec.dim;
        let weighted = mode == ResidualMode::Weighted;
        let concat = mode == ResidualMode::DirectConcat;
        let proj = |name: &str| Linear::new(&scope.pp(name), 2 * c, c, Init::FanInUniform { fan_in: 2 * c });
        Ok(Self {
            trans_r: (!last).then(|| spec.build(&scope.pp("trans_r"))).transpose()?,
            trans_t: (!last).then(|| spec.build(&scope.pp("trans_t"))).transpose()?,
            trans_rt: spec.build(&scope.pp("trans_rt"))?,
            trans_w: weighted.then(|| spec.build(&scope.pp("trans_w"))).transpose()?,
            linear_w: weighted
                .then(|| Linear::new(&scope.pp("linear_w"), c, 1, Init::FanInUniform { fan_in: c }))
                .transpose()?,
            merge_r: (concat && !last).then(|| proj("merge_r")).transpose()?,
            merge_t: (concat && !last).then(|| proj("merge_t")).transpose()?,
            merge_out: (concat && last).then(|| proj("merge_out")).transpose()?,
            mode,
        })
    }

    pub fn is_last(&self) -> bool {
        self.trans_r.is_none()
    }

    /// The per-stream transformer `trans_r`, if this is not the last iteration.
    pub fn trans_r(&self) -> Option<&TransformerLayer> {
        self.trans_r.as_ref()
    }

    pub fn trans_t(&self) -> Option<&TransformerLayer> {
        self.trans_t.as_ref()
    }

    pub fn trans_rt(&self) -> &TransformerLayer {
        &self.trans_rt
    }

    /// One fusion iteration on `B × HW × C` token sets.
    pub fn forward(&self, f_r: &Tensor, f_t: &Tensor, ctx: &ForwardCtx) -> Result<FusionState> {
        if f_r.dims() != f_t.dims() {
            return Err(GlassError::shape(format!(
                "fusion streams differ: rgb {:?} vs thermal {:?}",
                f_r.dims(),
                f_t.dims()
            )));
        }
        let (_, hw, _) = f_r.dims3()?;
        let f_rt = self.trans_rt.forward(&Tensor::cat(&[f_r, f_t], 1)?, ctx)?;
        let w = match (&self.trans_w, &self.linear_w) {
            (Some(tw), Some(lw)) => match ctx.overrides.fusion {
                Some(v) => Some(constant_like(&f_rt.narrow(D::Minus1, 0, 1)?, v)?),
                None => Some(sigmoid(&lw.forward(&tw.forward(&f_rt, ctx)?)?)?),
            },
            _ => None,
        };
        let mut state = FusionState {
            f_rt,
            w,
            rgb_next: None,
            thermal_next: None,
        };
        if let (Some(tr), Some(tt)) = (&self.trans_r, &self.trans_t) {
            let mixed = state.weighted()?;
            let (mix_r, mix_t) = (mixed.narrow(1, 0, hw)?, mixed.narrow(1, hw, hw)?);
            let (own_r, own_t) = (tr.forward(f_r, ctx)?, tt.forward(f_t, ctx)?);
            let (next_r, next_t) = match (&self.merge_r, &self.merge_t) {
                (Some(mr), Some(mt)) => (
                    mr.forward(&Tensor::cat(&[&own_r, &mix_r], D::Minus1)?)?,
                    mt.forward(&Tensor::cat(&[&own_t, &mix_t], D::Minus1)?)?,
                ),
                _ => ((own_r + mix_r)?, (own_t + mix_t)?),
            };
            state.rgb_next = Some(next_r);
            state.thermal_next = Some(next_t);
        }
        Ok(state)
    }

    /// Fused `B × HW × C` tokens from a final-iteration state.
    pub fn fuse(&self, state: &FusionState) -> Result<Tensor> {
        let hw = state.f_rt.dims()[1] / 2;
        let mixed = state.weighted()?;
        let (a, b) = (mixed.narrow(1, 0, hw)?, mixed.narrow(1, hw, hw)?);
        match (&self.merge_out, self.mode) {
            (Some(m), ResidualMode::DirectConcat) => m.forward(&Tensor::cat(&[&a, &b], D::Minus1)?),
            _ => Ok((a + b)?),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mfm {
    blocks: Vec<MfmBlock>,
}

impl Mfm {
    pub fn new(scope: &ParamScope, spec: TransformerSpec, mode: ResidualMode, iterations: usize) -> Result<Self> {
        let blocks = (1..=iterations)
            .map(|i| MfmBlock::new(&scope.pp(format!("iter{i}")), spec, mode, i == iterations))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[MfmBlock] {
        &self.blocks
    }

    /// Runs every iteration; returns the fused tokens and each iteration's state.
    pub fn forward_tokens(&self, f_r: &Tensor, f_t: &Tensor, ctx: &ForwardCtx) -> Result<(Tensor, Vec<FusionState>)> {
        let mut states = Vec::with_capacity(self.blocks.len());
        let (mut r, mut t) = (f_r.clone(), f_t.clone());
        for block in &self.blocks {
            let state = block.forward(&r, &t, ctx)?;
            if let (Some(nr), Some(nt)) = (&state.rgb_next, &state.thermal_next) {
                r = nr.clone();
                t = nt.clone();
            }
            states.push(state);
        }
        let last = self.blocks.last().expect("at least one iteration");
        let fused = last.fuse(states.last().unwrap())?;
        Ok((fused, states))
    }

    /// Spatial in, spatial out (`H × W × C`).
    pub fn forward(&self, f_r: &FeatureVolume, f_t: &FeatureVolume, ctx: &ForwardCtx) -> Result<(FeatureVolume, Vec<FusionState>)> {
        let (h, w) = (f_r.height(), f_r.width());
        let (fused, states) = self.forward_tokens(f_r.to_tokens()?.tensor(), f_t.to_tokens()?.tensor(), ctx)?;
        Ok((FeatureVolume::from_tokens(fused, h, w)?.to_spatial()?, states))
    }
}

/// Bridge for single-modality variants: the stream passes through one
/// transformer layer per iteration with no cross-modal term.
#[derive(Debug, Clone)]
pub struct SingleStreamBridge {
    layers: Vec<TransformerLayer>,
}

impl SingleStreamBridge {
    pub fn new(scope: &ParamScope, spec: TransformerSpec, iterations: usize, stream: &str) -> Result<Self> {
        let layers = (1..=iterations)
            .map(|i| spec.build(&scope.pp(format!("iter{i}")).pp(stream)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward_tokens(&self, tokens: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut x = tokens.clone();
        for layer in &self.layers {
            x = layer.forward(&x, ctx)?;
        }
        Ok(x)
    }
}
