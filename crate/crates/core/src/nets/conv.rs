//! 2D convolution as patch extraction followed by a batched matrix product,
//! several times faster on CPU than the substrate's direct convolution for
//! the small channel counts used here.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Visits every output position with its patch row and, per input
    /// channel and kernel row, the in-bounds span of taps:
    /// `f(position, patch offset, input offset, len)`.
    #[inline]
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ho, wo) = self.out();
        let (k, hw) = (self.k, self.h * self.w);
        for oy in 0..ho {
            let y0 = (oy * self.stride) as isize - self.pad as isize;
            for ox in 0..wo {
                let x0 = (ox * self.stride) as isize - self.pad as isize;
                let lo = (-x0).max(0) as usize;
                let hi = (self.w as isize - x0).min(k as isize);
                if hi <= lo as isize {
                    continue;
                }
                let len = hi as usize - lo;
                let p = oy * wo + ox;
                for ky in 0..k {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy as usize >= self.h {
                        continue;
                    }
                    let off = iy as usize * self.w + (x0 + lo as isize) as usize;
                    for ci in 0..self.c {
                        f(p, ci * k * k + ky * k + lo, ci * hw + off, len);
                    }
                }
            }
        }
    }
}

/// `(N, C, H, W)` → `(N, Ho·Wo, C·k·k)`
struct Im2Col(Geometry);

/// `(N, Ho·Wo, C·k·k)` → `(N, C, H, W)`, summing overlapping patches.
struct Col2Im(Geometry);

fn f32_slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    match (s, l.contiguous_offsets()) {
        (CpuStorage::F32(v), Some((a, b))) => Ok(&v[a..b]),
        _ => Err(candle_core::Error::Msg("conv expects contiguous f32".into())),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = f32_slice(s, l)?;
        let n = l.dims()[0];
        let (ho, wo) = g.out();
        let (rows, cols) = (g.c * g.k * g.k, ho * wo);
        let mut out = vec![0f32; n * rows * cols];
        for b in 0..n {
            let src = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
            let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
            g.for_each_span(|p, r, i, len| {
                dst[p * rows + r..p * rows + r + len].copy_from_slice(&src[i..i + len]);
            });
        }
        Ok((CpuStorage::F32(out), Shape::from((n, cols, rows))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let cols_in = f32_slice(s, l)?;
        let n = l.dims()[0];
        let (ho, wo) = g.out();
        let (rows, cols) = (g.c * g.k * g.k, ho * wo);
        let img = g.c * g.h * g.w;
        let mut out = vec![0f32; n * img];
        for b in 0..n {
            let src = &cols_in[b * rows * cols..(b + 1) * rows * cols];
            let dst = &mut out[b * img..(b + 1) * img];
            g.for_each_span(|p, r, i, len| {
                for (d, s) in dst[i..i + len].iter_mut().zip(&src[p * rows + r..p * rows + r + len]) {
                    *d += s;
                }
            });
        }
        Ok((CpuStorage::F32(out), Shape::from((n, g.c, g.h, g.w))))
    }
}

/// Square-kernel convolution of `x (N, C, H, W)` with `weight (O, C, k, k)`
/// and zero padding `pad`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let g = Geometry {
        c,
        h,
        w,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.out();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wt = weight.reshape((o, c * k * k))?.t()?;
    let y = cols.reshape((n * ho * wo, c * k * k))?.matmul(&wt)?;
    Ok(y.reshape((n, ho * wo, o))?.transpose(1, 2)?.contiguous()?.reshape((n, o, ho, wo))?)
}
