//! 3×3 convolution, stride 1, zero "same" padding of width 1.
//!
//! Implemented as im2col followed by a matrix product. Batch items are
//! processed in parallel; weight gradients are reduced in batch order.

use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Borrowed convolution parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'a, T = f32> {
    /// (out_ch, in_ch, 3, 3)
    pub kernel: &'a Tensor<T>,
    /// (out_ch)
    pub bias: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<'a, T: Real> ConvParams<'a, T> {
    pub fn new(kernel: &'a Tensor<T>, bias: &'a Tensor<T>) -> Result<Self> {
        let p = ConvParams { kernel, bias };
        p.channels()?;
        Ok(p)
    }

    /// Returns (in_ch, out_ch) after validating the parameter shapes.
    pub fn channels(&self) -> Result<(usize, usize)> {
        match *self.kernel.dims() {
            [out, inp, KERNEL, KERNEL] => {
                if self.bias.dims() != [out] {
                    return Err(Error::shape(format!(
                        "conv bias dims {:?} do not match {out} output channels",
                        self.bias.dims()
                    )));
                }
                Ok((inp, out))
            }
            ref d => Err(Error::shape(format!(
                "conv kernel must be (out, in, 3, 3), got {d:?}"
            ))),
        }
    }
}

fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((ch * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((ch * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(input: &Tensor<T>, params: &ConvParams<'_, T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.nchw()?;
    let (in_ch, out_ch) = params.channels()?;
    if c != in_ch {
        return Err(Error::shape(format!(
            "conv expects {in_ch} input channels, got {c}"
        )));
    }
    let hw = h * w;
    let k = in_ch * TAPS;
    let kernel = params.kernel.data();
    let bias = params.bias.data();
    let mut out = vec![T::zero(); n * out_ch * hw];
    out.par_chunks_mut(out_ch * hw)
        .zip(input.data().par_chunks(c * hw))
        .for_each(|(dst, img)| {
            let mut col = vec![T::zero(); k * hw];
            im2col(img, c, h, w, &mut col);
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(bias[o]);
            }
            gemm_nn(out_ch, hw, k, kernel, &col, dst);
        });
    Tensor::new(&[n, out_ch, h, w], out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = input.nchw()?;
    let (in_ch, out_ch) = params.channels()?;
    if c != in_ch || grad_out.nchw()? != [n, out_ch, h, w] {
        return Err(Error::shape(format!(
            "conv backward: input {:?} / grad {:?} inconsistent with kernel {:?}",
            input.dims(),
            grad_out.dims(),
            params.kernel.dims()
        )));
    }
    let hw = h * w;
    let k = in_ch * TAPS;
    let kernel = params.kernel.data();

    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(c * hw)
        .zip(grad_out.data().par_chunks(out_ch * hw))
        .map(|(img, g)| {
            let mut col = vec![T::zero(); k * hw];
            im2col(img, c, h, w, &mut col);
            let mut gk = vec![T::zero(); out_ch * k];
            gemm_nt(out_ch, k, hw, g, &col, &mut gk);
            let gb: Vec<T> = g.chunks(hw).map(|plane| plane.iter().copied().sum()).collect();
            col.fill(T::zero());
            gemm_tn(k, hw, out_ch, kernel, g, &mut col);
            let mut gi = vec![T::zero(); c * hw];
            col2im(&col, c, h, w, &mut gi);
            (gk, gb, gi)
        })
        .collect();

    let mut grad_kernel = vec![T::zero(); out_ch * k];
    let mut grad_bias = vec![T::zero(); out_ch];
    let mut grad_input = Vec::with_capacity(n * c * hw);
    for (gk, gb, gi) in per_item {
        for (a, b) in grad_kernel.iter_mut().zip(gk) {
            *a = *a + b;
        }
        for (a, b) in grad_bias.iter_mut().zip(gb) {
            *a = *a + b;
        }
        grad_input.extend(gi);
    }
    Ok(ConvGrads {
        input: Tensor::new(&[n, c, h, w], grad_input)?,
        kernel: Tensor::new(params.kernel.dims(), grad_kernel)?,
        bias: Tensor::new(&[out_ch], grad_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center_only(v: f32) -> (Tensor<f32>, Tensor<f32>) {
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = v;
        (k, Tensor::zeros(&[1]))
    }

    fn params<'a>(kb: &'a (Tensor<f32>, Tensor<f32>)) -> ConvParams<'a, f32> {
        ConvParams::new(&kb.0, &kb.1).unwrap()
    }

    #[test]
    fn identity_kernel_passes_value_through() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.5f32]).unwrap();
        let y = conv2d_forward(&x, &params(&center_only(1.0))).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn ones_window_sums_with_zero_padding() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let kb = (Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]));
        let y = conv2d_forward(&x, &params(&kb)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        assert!(matches!(
            conv2d_forward(&x, &params(&center_only(1.0))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f32 * 0.37).sin());
        let kb = (
            Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f32 * 0.11).cos()),
            Tensor::full(&[3], 0.5),
        );
        let g = conv2d_backward(&x, &params(&kb), &Tensor::zeros(&[2, 3, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0f32]).unwrap();
        let go = Tensor::new(&[1, 1, 1, 1], vec![-2.0f32]).unwrap();
        let g = conv2d_backward(&x, &params(&center_only(0.7)), &go).unwrap();
        assert_eq!(g.kernel.data()[4], -6.0);
        assert_eq!(g.bias.data(), &[-2.0]);
        assert!((g.input.data()[0] - 0.7 * -2.0).abs() < 1e-7);
    }
}
