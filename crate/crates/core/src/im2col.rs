//! Patch extraction for convolution as a custom op with explicit adjoint.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    /// Calls `f(col_index, image_index)` for every in-bounds pair of one sample
    /// with `c` channels.
    fn for_each(&self, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw(h, w);
        let plane = ho * wo;
        for ci in 0..c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * plane;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let img_row = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                f(row + oy * wo + ox, img_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

fn gather<T: Copy + Default>(x: &[T], n: usize, c: usize, h: usize, w: usize, g: &Geometry) -> Vec<T> {
    let (ho, wo) = g.out_hw(h, w);
    let (src, dst) = (c * h * w, c * g.kh * g.kw * ho * wo);
    let mut out = vec![T::default(); n * dst];
    for s in 0..n {
        let (xs, os) = (&x[s * src..(s + 1) * src], &mut out[s * dst..(s + 1) * dst]);
        g.for_each(c, h, w, |col, img| os[col] = xs[img]);
    }
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(
    cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    g: &Geometry,
) -> Vec<T> {
    let (ho, wo) = g.out_hw(h, w);
    let (src, dst) = (c * g.kh * g.kw * ho * wo, c * h * w);
    let mut out = vec![T::default(); n * dst];
    for s in 0..n {
        let (cs, os) = (&cols[s * src..(s + 1) * src], &mut out[s * dst..(s + 1) * dst]);
        g.for_each(c, h, w, |col, img| os[img] += cs[col]);
    }
    out
}

/// (N, C, H, W) → (N, C·kh·kw, Ho·Wo); rows follow the (C, kh, kw) weight order.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`] for an image of the given channels and size.
struct Col2Im {
    g: Geometry,
    c: usize,
    h: usize,
    w: usize,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let (ho, wo) = self.0.out_hw(h, w);
        let shape = Shape::from((n, c * self.0.kh * self.0.kw, ho * wo));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(gather(contiguous(d, layout)?, n, c, h, w, &self.0)),
            CpuStorage::F64(d) => CpuStorage::F64(gather(contiguous(d, layout)?, n, c, h, w, &self.0)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im { g: self.0, c, h, w })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, _, _) = layout.shape().dims3()?;
        let (c, h, w, g) = (self.c, self.h, self.w, &self.g);
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(scatter(contiguous(d, layout)?, n, c, h, w, g)),
            CpuStorage::F64(d) => CpuStorage::F64(scatter(contiguous(d, layout)?, n, c, h, w, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.g))?))
    }
}

/// Patches of `x` for a `kh`×`kw` kernel, as (N, C·kh·kw, Ho·Wo).
pub fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col(Geometry { kh, kw, stride, pad }))
}

/// Sums (N, C·kh·kw, Ho·Wo) patches back into an (N, C, H, W) image.
pub fn col2im(
    cols: &Tensor,
    (c, h, w): (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    let g = Geometry { kh, kw, stride, pad };
    cols.contiguous()?.apply_op1(Col2Im { g, c, h, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn col2im_is_the_adjoint() {
        // <im2col(x), c> = <x, col2im(c)> for random x and c
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap()).unwrap();
        let cols = im2col(x.as_tensor(), 3, 3, 2, 1).unwrap();
        assert_eq!(cols.dims(), &[2, 27, 12]);
        let c = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
        let lhs = (&cols * &c).unwrap().sum_all().unwrap();
        let grads = lhs.backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        // the gradient of <im2col(x), c> with respect to x is col2im(c)
        let rhs = (x.as_tensor() * gx).unwrap().sum_all().unwrap();
        let (l, r) = (lhs.to_scalar::<f64>().unwrap(), rhs.to_scalar::<f64>().unwrap());
        assert!((l - r).abs() < 1e-10, "{l} vs {r}");
    }
}
