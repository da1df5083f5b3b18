use candle_core::Tensor;

use crate::error::{GlassError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `B × H × W × C`
    Spatial,
    /// `B × (H·W) × C`, row-major over H then W.
    Token,
}

/// A batch of `H × W × C` feature maps in spatial or token form.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    data: Tensor,
    height: usize,
    width: usize,
    layout: Layout,
}

impl FeatureVolume {
    /// From the convolutional `B × C × H × W` layout.
    pub fn from_nchw(x: &Tensor) -> Result<Self> {
        let (_, _, h, w) = x.dims4()?;
        Ok(Self {
            data: x.permute((0, 2, 3, 1))?.contiguous()?,
            height: h,
            width: w,
            layout: Layout::Spatial,
        })
    }

    pub fn from_tokens(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != height * width {
            return Err(GlassError::shape(format!(
                "{n} tokens cannot form a {height}x{width} grid"
            )));
        }
        Ok(Self {
            data: tokens,
            height,
            width,
            layout: Layout::Token,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        *self.data.dims().last().unwrap()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn to_tokens(&self) -> Result<Self> {
        let b = self.data.dims()[0];
        Ok(Self {
            data: self.data.reshape((b, self.height * self.width, self.channels()))?,
            layout: Layout::Token,
            ..self.clone()
        })
    }

    pub fn to_spatial(&self) -> Result<Self> {
        let b = self.data.dims()[0];
        Ok(Self {
            data: self.data.reshape((b, self.height, self.width, self.channels()))?,
            layout: Layout::Spatial,
            ..self.clone()
        })
    }

    pub fn to_nchw(&self) -> Result<Tensor> {
        Ok(self.to_spatial()?.data.permute((0, 3, 1, 2))?.contiguous()?)
    }
}
