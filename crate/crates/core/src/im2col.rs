//! Patch extraction for same-padded, stride-1 convolutions over NHWC tensors.
//! candle's CPU convolution is a direct loop; unfolding and then running one
//! matmul is an order of magnitude faster on the shapes used here.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// `[B, H, W, C] -> [B, H, W, k*k*C]`, zero outside the image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Unfold {
    pub kernel: usize,
}

/// Adjoint of [`Unfold`]: sums each column entry back onto its source pixel.
#[derive(Debug, Clone, Copy)]
struct Fold {
    kernel: usize,
}

fn dims(layout: &Layout, op: &str) -> candle_core::Result<(usize, usize, usize, usize)> {
    if !layout.is_contiguous() {
        candle_core::bail!("{op} expects a contiguous input");
    }
    layout.shape().dims4()
}

fn slice<'a>(storage: &'a CpuStorage, layout: &Layout, op: &str) -> candle_core::Result<&'a [f32]> {
    match storage {
        CpuStorage::F32(v) => {
            let start = layout.start_offset();
            Ok(&v[start..start + layout.shape().elem_count()])
        }
        _ => candle_core::bail!("{op} supports f32 only"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = dims(layout, self.name())?;
        let src = slice(storage, layout, self.name())?;
        let k = self.kernel;
        let r = (k / 2) as isize;
        let kk = k * k * c;
        let mut out = vec![0f32; b * h * w * kk];
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let o = ((n * h + y) * w + x) * kk;
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = x as isize + dx as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let s = ((n * h + sy as usize) * w + sx as usize) * c;
                            let d = o + (dy * k + dx) * c;
                            out[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, h, w, kk))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?.apply_op1_no_bwd(&Fold { kernel: self.kernel })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, kk) = dims(layout, self.name())?;
        let src = slice(storage, layout, self.name())?;
        let k = self.kernel;
        let c = kk / (k * k);
        let r = (k / 2) as isize;
        let mut out = vec![0f32; b * h * w * c];
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let o = ((n * h + y) * w + x) * kk;
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sx = x as isize + dx as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let d = ((n * h + sy as usize) * w + sx as usize) * c;
                            let s = o + (dy * k + dx) * c;
                            for (acc, v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((b, h, w, c))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn unfold_matches_padded_shifts() {
        let x = Tensor::arange(0f32, 2. * 3. * 4. * 2., &Device::Cpu).unwrap().reshape((2, 3, 4, 2)).unwrap();
        let cols = x.apply_op1_no_bwd(&Unfold { kernel: 3 }).unwrap();
        let p = x.pad_with_zeros(1, 1, 1).unwrap().pad_with_zeros(2, 1, 1).unwrap();
        let mut views = Vec::new();
        for dy in 0..3 {
            for dx in 0..3 {
                views.push(p.narrow(1, dy, 3).unwrap().narrow(2, dx, 4).unwrap());
            }
        }
        let want = Tensor::cat(&views, 3).unwrap();
        assert_eq!(
            cols.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            want.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn fold_is_the_adjoint() {
        // <unfold(x), y> == <x, fold(y)> for random x, y.
        let x = Var::from_tensor(&Tensor::randn(0f32, 1., (2, 5, 4, 3), &Device::Cpu).unwrap()).unwrap();
        let y = Tensor::randn(0f32, 1., (2, 5, 4, 27), &Device::Cpu).unwrap();
        let u = x.as_tensor().apply_op1(Unfold { kernel: 3 }).unwrap();
        let lhs = (&u * &y).unwrap().sum_all().unwrap();
        let grads = lhs.backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        let rhs = (x.as_tensor() * gx).unwrap().sum_all().unwrap();
        let (a, b) = (lhs.to_scalar::<f32>().unwrap(), rhs.to_scalar::<f32>().unwrap());
        assert!((a - b).abs() < 1e-3 * a.abs().max(1.0), "{a} vs {b}");
    }
}
