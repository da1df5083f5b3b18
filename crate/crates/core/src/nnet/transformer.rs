//! Post-norm transformer encoder layer: multi-head self-attention followed by
//! a two-layer ReLU feed-forward network, each wrapped in a residual
//! connection and layer normalization.

use candle_core::Tensor;

use crate::error::{GlassError, Result};
use crate::nnet::layers::{dropout, softmax_last, ForwardCtx, LayerNorm, Linear};
use crate::nnet::params::{Init, ParamScope};

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    fc1: Linear,
    fc2: Linear,
    norm1: LayerNorm,
    norm2: LayerNorm,
    heads: usize,
    dim: usize,
    dropout: f64,
}

impl TransformerLayer {
    pub fn new(scope: &ParamScope, dim: usize, heads: usize, ffn_dim: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(GlassError::Config(format!(
                "transformer width {dim} is not divisible by {heads} heads"
            )));
        }
        let attn = scope.pp("attn");
        let xavier = Init::XavierUniform {
            fan_in: dim,
            fan_out: dim,
        };
        let ffn = scope.pp("ffn");
        Ok(Self {
            q: Linear::new(&attn.pp("q"), dim, dim, xavier)?,
            k: Linear::new(&attn.pp("k"), dim, dim, xavier)?,
            v: Linear::new(&attn.pp("v"), dim, dim, xavier)?,
            out: Linear::new(&attn.pp("out"), dim, dim, Init::FanInUniform { fan_in: dim })?,
            fc1: Linear::new(&ffn.pp("fc1"), dim, ffn_dim, Init::FanInUniform { fan_in: dim })?,
            fc2: Linear::new(&ffn.pp("fc2"), ffn_dim, dim, Init::FanInUniform { fan_in: ffn_dim })?,
            norm1: LayerNorm::new(&scope.pp("norm1"), dim)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            heads,
            dim,
            dropout,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `tokens: B × N × C -> B × N × C`
    pub fn forward(&self, tokens: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        Ok(self.forward_with_attention(tokens, ctx)?.0)
    }

    /// Also returns the attention probabilities, `B × heads × N × N`.
    pub fn forward_with_attention(&self, tokens: &Tensor, ctx: &ForwardCtx) -> Result<(Tensor, Tensor)> {
        let (b, n, c) = tokens.dims3()?;
        if c != self.dim {
            return Err(GlassError::shape(format!(
                "transformer layer of width {} received {c}-channel tokens",
                self.dim
            )));
        }
        let hd = c / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(tokens)?)?;
        let k = split(self.k.forward(tokens)?)?;
        let v = split(self.v.forward(tokens)?)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let probs = softmax_last(&scores)?;
        let attended = dropout(&probs, self.dropout, ctx)?.matmul(&v)?;
        let merged = attended.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        let attn_out = dropout(&self.out.forward(&merged)?, self.dropout, ctx)?;
        let x = self.norm1.forward(&(tokens + attn_out)?)?;

        let hidden = dropout(&self.fc1.forward(&x)?.relu()?, self.dropout, ctx)?;
        let ffn_out = dropout(&self.fc2.forward(&hidden)?, self.dropout, ctx)?;
        Ok((self.norm2.forward(&(x + ffn_out)?)?, probs))
    }
}
