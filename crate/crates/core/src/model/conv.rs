use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

fn out_size(size: usize) -> usize {
    (size - 1) / 2 + 1
}

/// Patch geometry of a 3x3, stride-2, padding-1 convolution over a
/// channels-last `[N, H, W, C]` input. Each patch row holds `9 * C` taps
/// followed by a constant 1 that carries the bias.
#[derive(Debug, Clone, Copy)]
struct Patches {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Patches {
    fn oh(&self) -> usize {
        out_size(self.h)
    }

    fn ow(&self) -> usize {
        out_size(self.w)
    }

    fn row(&self) -> usize {
        9 * self.c + 1
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds tap, where
    /// both offsets address the first of `c` contiguous channels.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = (self.oh(), self.ow());
        let row = self.row();
        for n in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let col = ((n * oh + oy) * ow + ox) * row;
                    for ky in 0..3 {
                        let Some(y) = (2 * oy + ky).checked_sub(1).filter(|&y| y < self.h) else {
                            continue;
                        };
                        for kx in 0..3 {
                            let Some(x) = (2 * ox + kx).checked_sub(1).filter(|&x| x < self.w) else {
                                continue;
                            };
                            f(col + (ky * 3 + kx) * self.c, ((n * self.h + y) * self.w + x) * self.c);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, src: &[T], one: T) -> Vec<T> {
        let mut dst = vec![T::default(); self.n * self.oh() * self.ow() * self.row()];
        let c = self.c;
        self.for_each_tap(|d, s| dst[d..d + c].copy_from_slice(&src[s..s + c]));
        for r in dst.chunks_exact_mut(self.row()) {
            r[9 * c] = one;
        }
        dst
    }

    fn col2im<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T]) -> Vec<T> {
        let mut dst = vec![T::default(); self.n * self.h * self.w * self.c];
        let c = self.c;
        self.for_each_tap(|d, s| {
            for (o, i) in dst[s..s + c].iter_mut().zip(&src[d..d + c]) {
                *o += *i;
            }
        });
        dst
    }
}

fn contiguous<'a, T: candle_core::WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("patch ops need contiguous input".into())),
    }
}

struct Im2Col(Patches);
struct Col2Im(Patches);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-3x3-s2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(p.im2col(contiguous(v, l)?, 1.0)),
            CpuStorage::F64(v) => CpuStorage::F64(p.im2col(contiguous(v, l)?, 1.0)),
            _ => return Err(candle_core::Error::Msg("patch ops support f32 and f64".into())),
        };
        Ok((out, Shape::from((p.n, p.oh(), p.ow(), p.row()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-3x3-s2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(p.col2im(contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(p.col2im(contiguous(v, l)?)),
            _ => return Err(candle_core::Error::Msg("patch ops support f32 and f64".into())),
        };
        Ok((out, Shape::from((p.n, p.h, p.w, p.c))))
    }
}

/// 3x3 convolution, stride 2, zero padding 1, on channels-last input
/// `[N, H, W, C]`, giving `[N, H', W', C_out]`. `w` uses the usual
/// `[C_out, C, 3, 3]` layout.
pub fn conv3x3_s2(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, wd, c) = x.dims4()?;
    let c_out = w.dim(0)?;
    let p = Patches { n, h, w: wd, c };
    let cols = x
        .contiguous()?
        .apply_op1(Im2Col(p))?
        .reshape((n * p.oh() * p.ow(), p.row()))?;
    // Reorder taps to (ky, kx, c) to match the patch rows.
    let w2 = Tensor::cat(&[w.permute((0, 2, 3, 1))?.reshape((c_out, 9 * c))?, b.unsqueeze(1)?], 1)?;
    Ok(cols.matmul(&w2.t()?)?.reshape((n, p.oh(), p.ow(), c_out))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_abs(t: Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_library_convolution() {
        let dev = Device::Cpu;
        for (h, w) in [(8, 8), (7, 9), (32, 32), (1, 2)] {
            let x = Tensor::randn(0f64, 1.0, (2, h, w, 3), &dev).unwrap();
            let k = Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
            let b = Tensor::randn(0f64, 1.0, 4, &dev).unwrap();
            let ours = conv3x3_s2(&x, &k, &b).unwrap();
            let reference = x
                .permute((0, 3, 1, 2))
                .unwrap()
                .conv2d(&k, 1, 2, 1, 1)
                .unwrap()
                .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
                .unwrap()
                .permute((0, 2, 3, 1))
                .unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs((ours - reference).unwrap()) < 1e-12);
        }
    }

    // The library's transposed convolution mis-sizes even inputs, so the
    // reference comparison uses odd sizes and finite differences cover the rest.
    #[test]
    fn gradients_match_library_convolution() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 7, 9, 3), &dev).unwrap()).unwrap();
        let k = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 4, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 5, 4), &dev).unwrap();
        let ours = conv3x3_s2(&x, &k, &b).unwrap();
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let reference = x
            .permute((0, 3, 1, 2))
            .unwrap()
            .conv2d(&k, 1, 2, 1, 1)
            .unwrap()
            .permute((0, 2, 3, 1))
            .unwrap()
            .broadcast_add(&b)
            .unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [x.as_tensor(), k.as_tensor(), b.as_tensor()] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap();
            assert!(max_abs(d) < 1e-10);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let (n, h, w, c) = (1, 4, 6, 2);
        let x0: Vec<f64> = (0..n * h * w * c).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let k = Tensor::randn(0f64, 1.0, (3, c, 3, 3), &dev).unwrap();
        let b = Tensor::randn(0f64, 1.0, 3, &dev).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (n, 2, 3, 3), &dev).unwrap();
        let f = |v: &[f64]| {
            let x = Tensor::from_slice(v, (n, h, w, c), &dev).unwrap();
            (conv3x3_s2(&x, &k, &b).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let x = Var::from_tensor(&Tensor::from_slice(&x0, (n, h, w, c), &dev).unwrap()).unwrap();
        let g = (conv3x3_s2(&x, &k, &b).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..x0.len() {
            let (mut up, mut dn) = (x0.clone(), x0.clone());
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "coordinate {i}: {fd} vs {}", g[i]);
        }
    }
}
