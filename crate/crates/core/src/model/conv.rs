//! 2-D convolution lowered to im2col + matmul.
//!
//! The unfold step is a custom op whose backward pass is the matching fold
//! (scatter-add), so both directions of the convolution run through gemm.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Visits every (column index, input offset) pair of one output position.
    #[inline]
    fn for_each_tap(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let mut idx = 0;
        for c in 0..self.channels {
            for ky in 0..self.kernel {
                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                for kx in 0..self.kernel {
                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width {
                        f(idx, (c * self.height + iy as usize) * self.width + ix as usize);
                    }
                    idx += 1;
                }
            }
        }
    }
}

fn unfold<T: Copy + Default>(x: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let plen = g.patch_len();
    let img = g.channels * g.height * g.width;
    let mut out = vec![T::default(); batch * g.out_h * g.out_w * plen];
    for b in 0..batch {
        let src = &x[b * img..(b + 1) * img];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row_start = ((b * g.out_h + oy) * g.out_w + ox) * plen;
                let row = &mut out[row_start..row_start + plen];
                g.for_each_tap(oy, ox, |i, off| row[i] = src[off]);
            }
        }
    }
    out
}

fn fold<T: Copy + Default + std::ops::AddAssign>(cols: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let plen = g.patch_len();
    let img = g.channels * g.height * g.width;
    let mut out = vec![T::default(); batch * img];
    for b in 0..batch {
        let dst = &mut out[b * img..(b + 1) * img];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row_start = ((b * g.out_h + oy) * g.out_w + ox) * plen;
                let row = &cols[row_start..row_start + plen];
                g.for_each_tap(oy, ox, |i, off| dst[off] += row[i]);
            }
        }
    }
    out
}

fn contiguous_range(layout: &Layout, op: &'static str) -> candle_core::Result<(usize, usize)> {
    layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::RequiresContiguous { op })
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "im2col-unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = contiguous_range(layout, "im2col-unfold")?;
        let batch = layout.dims()[0];
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(&v[start..end], batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(&v[start..end], batch, g)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col-unfold"));
            }
        };
        Ok((out, Shape::from((batch, g.out_h * g.out_w, g.patch_len()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "im2col-fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = contiguous_range(layout, "im2col-fold")?;
        let batch = layout.dims()[0];
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(&v[start..end], batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(&v[start..end], batch, g)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col-fold"));
            }
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Unfold(self.0))?))
    }
}

/// Convolves `input` `[B, C, H, W]` with `weight` `[O, C, K, K]`, adding `bias` `[O]` if given.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = input.dims4()?;
    let (out_c, in_c, kernel, kernel_w) = weight.dims4()?;
    if in_c != channels || kernel != kernel_w {
        return Err(candle_core::Error::Msg(format!(
            "conv2d: input has {channels} channels, weight expects {in_c} with {kernel}x{kernel_w} kernel"
        )));
    }
    let out_h = (height + 2 * padding - kernel) / stride + 1;
    let out_w = (width + 2 * padding - kernel) / stride + 1;
    let g = Geometry {
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
        out_h,
        out_w,
    };
    let cols = input.contiguous()?.apply_op1(Unfold(g))?;
    let w = weight.reshape((out_c, g.patch_len()))?.t()?;
    let y = cols.broadcast_matmul(&w)?;
    let y = y.transpose(1, 2)?.reshape((batch, out_c, out_h, out_w))?;
    match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, out_c, 1, 1))?),
        None => Ok(y),
    }
}
