//! Patch extraction (`im2col`) and its adjoint (`col2im`) as candle custom
//! ops, so a convolution is one unfold node plus one matmul in the graph.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{GlassError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_size(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols_shape(&self) -> Shape {
        let (ho, wo) = self.out_size();
        Shape::from((self.n, self.c * self.k * self.k, ho * wo))
    }

    /// Calls `f(image_start, column_start, count)` for every run of in-bounds
    /// taps; image indices advance by `stride`, column indices by one.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_size();
        let (k, s, p) = (self.k, self.stride, self.pad);
        let plane = self.h * self.w;
        let cols_len = ho * wo;
        for kx in 0..k {
            // ox range with 0 <= ox*s + kx - p < w
            let lo = (p.saturating_sub(kx)).div_ceil(s);
            let hi = ((self.w + p).saturating_sub(kx)).div_ceil(s).min(wo);
            if lo >= hi {
                continue;
            }
            for b in 0..self.n {
                for ci in 0..self.c {
                    let img_base = (b * self.c + ci) * plane;
                    for ky in 0..k {
                        let row = ((b * self.c + ci) * k + ky) * k + kx;
                        let col_base = row * cols_len;
                        for oy in 0..ho {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= self.h {
                                continue;
                            }
                            let img = img_base + (iy - p) * self.w + lo * s + kx - p;
                            f(img, col_base + oy * wo + lo, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{op} needs a contiguous input"),
    }
}

fn unfold<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut dst = vec![T::default(); g.cols_shape().elem_count()];
    let s = g.stride;
    g.for_each_run(|i, j, n| {
        if s == 1 {
            dst[j..j + n].copy_from_slice(&src[i..i + n]);
        } else {
            for (d, v) in dst[j..j + n].iter_mut().zip(src[i..].iter().step_by(s)) {
                *d = *v;
            }
        }
    });
    dst
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut dst = vec![T::default(); g.n * g.c * g.h * g.w];
    let s = g.stride;
    g.for_each_run(|i, j, n| {
        for (d, v) in dst[i..].iter_mut().step_by(s).zip(&src[j..j + n]) {
            *d += *v;
        }
    });
    dst
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous(v, layout, "im2col")?, &self.0)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous(v, layout, "im2col")?, &self.0)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous(v, layout, "col2im")?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous(v, layout, "col2im")?, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `N × C × H × W` to `N × (C·k·k) × (Ho·Wo)` patch columns, zero padded.
/// Rows are ordered channel-major then `(ky, kx)`, matching a flattened
/// `O × C × k × k` kernel.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(GlassError::shape(format!(
            "a {k}×{k} kernel with stride {stride} and padding {pad} does not fit a {h}×{w} input"
        )));
    }
    let g = Geometry {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
    };
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}
