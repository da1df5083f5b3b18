//! Differentiable building blocks on top of candle tensors.
//!
//! Only primitive tensor ops with backward support are used so every layer
//! trains in both `f32` and `f64`.

use std::cell::RefCell;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::image::bilinear_taps;
use crate::error::{GlassError, Result};
use crate::nnet::im2col::im2col;
use crate::nnet::params::{Init, ParamScope};

/// Replaces attention weights with a constant, for structural checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeightOverrides {
    /// Every fusion-bridge weight `w` becomes this value.
    pub fusion: Option<f64>,
    /// Every decoder spatial-attention weight `w_r`, `w_t` becomes this value.
    pub decoder: Option<f64>,
}

/// Per-call forward state: mode, dropout randomness and test overrides.
#[derive(Debug)]
pub struct ForwardCtx {
    train: bool,
    rng: RefCell<ChaCha8Rng>,
    pub overrides: WeightOverrides,
}

impl ForwardCtx {
    /// Inference: running batch-norm statistics, no dropout.
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            overrides: WeightOverrides::default(),
        }
    }

    /// Training: batch statistics (running averages updated) and dropout
    /// drawn from a generator seeded with `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            overrides: WeightOverrides::default(),
        }
    }

    pub fn with_overrides(mut self, overrides: WeightOverrides) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 0.5 * (1 + tanh(x / 2)) stays finite, with finite gradients, for any input.
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Replaces `x` by a tensor of the same shape filled with `value`.
pub fn constant_like(x: &Tensor, value: f64) -> Result<Tensor> {
    Ok((x.zeros_like()? + value)?)
}

pub fn dropout(x: &Tensor, p: f64, ctx: &ForwardCtx) -> Result<Tensor> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let n = x.elem_count();
    let mask: Vec<f64> = {
        let mut rng = ctx.rng.borrow_mut();
        (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    };
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

fn interpolation_matrix(src: usize, dst: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; dst * src];
    for (i, (i0, i1, f)) in bilinear_taps(src, dst).into_iter().enumerate() {
        m[i * src + i0] += 1.0 - f as f64;
        m[i * src + i1] += f as f64;
    }
    Ok(Tensor::from_vec(m, (dst, src), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of an `N × C × H × W` tensor (half-pixel convention),
/// written as two interpolation matrix products so it is differentiable.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let rows = interpolation_matrix(h, height, x.dtype(), x.device())?;
    let cols = interpolation_matrix(w, width, x.dtype(), x.device())?.t()?;
    let y = rows.broadcast_matmul(&x.contiguous()?)?;
    Ok(y.broadcast_matmul(&cols)?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &ParamScope, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", (out_dim, in_dim), init)?,
            bias: Some(scope.param("bias", out_dim, Init::Const(0.0))?),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x[..., in] -> [..., out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

/// Patch columns times the flattened kernel. Same result as `Tensor::conv2d`
/// with a cheaper backward pass.
pub fn conv2d_im2col(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    conv2d_im2col_bias(x, weight, None, padding, stride)
}

/// As [`conv2d_im2col`]; a bias becomes one more kernel column against a row of ones.
pub fn conv2d_im2col_bias(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || stride == 0 {
        return Err(GlassError::shape(format!("kernel {:?} does not fit input {:?}", weight.dims(), x.dims())));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < k || wp < k {
        return Err(GlassError::shape(format!("input {h}×{w} is smaller than the {k}×{k} kernel")));
    }
    let (ho, wo) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
    let mut w2 = weight.reshape((o, c * k * k))?;
    if let Some(b) = bias {
        w2 = Tensor::cat(&[&w2, &b.reshape((o, 1))?], 1)?;
    }
    let with_ones = |cols: Tensor| -> Result<Tensor> {
        if bias.is_none() {
            return Ok(cols);
        }
        let (n, _, l) = cols.dims3()?;
        let ones = Tensor::ones((n, 1, l), cols.dtype(), cols.device())?;
        Ok(Tensor::cat(&[&cols, &ones], 1)?)
    };
    if k == 1 && stride == 1 && padding == 0 {
        let y = w2.broadcast_matmul(&with_ones(x.reshape((n, c, h * w))?)?)?;
        return Ok(y.reshape((n, o, h, w))?);
    }
    let cols = with_ones(im2col(x, k, stride, padding)?)?;
    Ok(w2.broadcast_matmul(&cols)?.reshape((n, o, ho, wo))?)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    pub fn new(scope: &ParamScope, spec: ConvSpec, init: Init) -> Result<Self> {
        let k = spec.kernel;
        Ok(Self {
            weight: scope.param("weight", (spec.out_ch, spec.in_ch, k, k), init)?,
            bias: if spec.bias {
                Some(scope.param("bias", spec.out_ch, Init::Const(0.0))?)
            } else {
                None
            },
            stride: spec.stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let expected = self.weight.dims()[1];
        if c != expected {
            return Err(GlassError::shape(format!(
                "convolution expects {expected} input channels, got {c}"
            )));
        }
        conv2d_im2col_bias(x, &self.weight, self.bias.as_ref(), self.padding, self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &ParamScope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", channels, Init::Const(1.0))?,
            bias: scope.param("bias", channels, Init::Const(0.0))?,
            running_mean: scope.buffer("running_mean", channels, 0.0)?,
            running_var: scope.buffer("running_var", channels, 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Works on a `C × (N·H·W)` view so every reduction runs over the last axis.
    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let xt = x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * w))?;
        let (mean, var) = if ctx.is_train() {
            let count = n * h * w;
            let mean = xt.mean_keepdim(1)?;
            let var = xt.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let m = self.momentum;
            let unbiased = if count > 1 {
                (var.detach() * (count as f64 / (count - 1) as f64))?
            } else {
                var.detach()
            };
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?;
            self.running_mean.set(&rm.detach())?;
            self.running_var.set(&rv.detach())?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((c, 1))?,
                self.running_var.as_tensor().detach().reshape((c, 1))?,
            )
        };
        let normed = xt.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = normed
            .broadcast_mul(&self.weight.reshape((c, 1))?)?
            .broadcast_add(&self.bias.reshape((c, 1))?)?;
        Ok(y.reshape((c, n, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

/// Repeats a `N × 1 × H × W` map over `channels`, as a matmul with a column of
/// ones so the gradient is a matmul too.
pub fn expand_channels(x: &Tensor, channels: usize) -> Result<Tensor> {
    let (n, one, h, w) = x.dims4()?;
    if one != 1 {
        return Err(GlassError::shape(format!("expected a single-channel map, got {:?}", x.dims())));
    }
    let ones = Tensor::ones((channels, 1), x.dtype(), x.device())?;
    let y = ones.broadcast_matmul(&x.reshape((n, 1, h * w))?)?;
    Ok(y.reshape((n, channels, h, w))?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &ParamScope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", dim, Init::Const(1.0))?,
            bias: scope.param("bias", dim, Init::Const(0.0))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Convolution, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(scope: &ParamScope, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        Ok(Self {
            conv: Conv2d::new(&scope.pp("conv"), spec, Init::HeUniform { fan_in })?,
            bn: BatchNorm2d::new(&scope.pp("bn"), spec.out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, ctx)?.relu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::ParamStore;

    #[test]
    fn im2col_matches_direct_convolution() {
        let dev = Device::Cpu;
        for (c, o, k, stride, pad, h, w) in [(3, 4, 3, 1, 1, 7, 6), (2, 5, 3, 2, 1, 9, 8), (3, 2, 7, 2, 3, 11, 10), (4, 3, 1, 2, 0, 5, 6), (4, 3, 1, 1, 0, 5, 6)] {
            let x = Tensor::randn(0f64, 1.0, (2, c, h, w), &dev).unwrap();
            let wt = Tensor::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap();
            let a = conv2d_im2col(&x, &wt, pad, stride).unwrap();
            let b = x.conv2d(&wt, pad, stride, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "{d}");
        }
    }

    #[test]
    fn im2col_bias_and_channel_expansion() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 5), &dev).unwrap();
        let wt = Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
        let b = Tensor::new(&[1.0f64, -2.0, 0.5, 3.0], &dev).unwrap();
        for (k, wt) in [(3, wt.clone()), (1, wt.narrow(2, 0, 1).unwrap().narrow(3, 0, 1).unwrap().contiguous().unwrap())] {
            let pad = k / 2;
            let a = conv2d_im2col_bias(&x, &wt, Some(&b), pad, 1).unwrap();
            let r = x.conv2d(&wt, pad, 1, 1, 1).unwrap().broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap();
            let d = (a - r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "{d}");
        }
        let m = Tensor::randn(0f64, 1.0, (2, 1, 3, 4), &dev).unwrap();
        let e = expand_channels(&m, 5).unwrap();
        let r = m.broadcast_as((2, 5, 3, 4)).unwrap();
        assert_eq!(e.flatten_all().unwrap().to_vec1::<f64>().unwrap(), r.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        let x = Tensor::new(&[-200f64, -1.0, 0.0, 1.0, 200.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y[2], 0.5);
        assert!((y[3] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let y = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn resize_matches_image_resampler() {
        use crate::datakit::image::Image;
        let img = Image::from_fn(5, 7, 1, |y, x, _| (y * 7 + x) as f32);
        let t = Tensor::from_vec(img.to_planar(), (1, 1, 5, 7), &Device::Cpu).unwrap();
        let up = resize_bilinear(&t, 12, 9).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let reference = img.resize_bilinear(12, 9);
        for (a, b) in up.iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let bn = BatchNorm2d::new(&store.root(), 2).unwrap();
        let x = Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = bn.forward(&x, &ForwardCtx::eval()).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| (v - expected).abs() < 1e-12));
        bn.forward(&(x * 3.0).unwrap(), &ForwardCtx::train(0)).unwrap();
        let rm = store.get("running_mean").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_seeded_and_inactive_in_eval() {
        let x = Tensor::ones(64, DType::F32, &Device::Cpu).unwrap();
        let a = dropout(&x, 0.5, &ForwardCtx::train(3)).unwrap().to_vec1::<f32>().unwrap();
        let b = dropout(&x, 0.5, &ForwardCtx::train(3)).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        let e = dropout(&x, 0.5, &ForwardCtx::eval()).unwrap().to_vec1::<f32>().unwrap();
        assert!(e.iter().all(|&v| v == 1.0));
    }
}
