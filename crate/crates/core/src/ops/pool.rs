//! 2×2 pooling with stride 2. Odd extents are floored: the trailing row or
//! column is dropped (49 → 24, 3 → 1).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn pooled_extent(extent: usize) -> Result<usize> {
    if extent < 2 {
        return Err(Error::shape(format!(
            "2x2 pooling needs spatial extent >= 2, got {extent}"
        )));
    }
    Ok(extent / 2)
}

/// Max-pool output plus the flat input index that won each window.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T = f32> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn max_pool2<T: Real>(input: &Tensor<T>) -> Result<MaxPoolOutput<T>> {
    let [n, c, h, w] = input.nchw()?;
    let (oh, ow) = (pooled_extent(h)?, pooled_extent(w)?);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    // first maximum in raster order wins ties
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(&[n, c, oh, ow], out)?,
        argmax,
    })
}

pub fn max_pool2_backward<T: Real>(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("max pool backward: gradient length mismatch"));
    }
    let mut gx = Tensor::zeros(input_dims);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(gx)
}

pub fn avg_pool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.nchw()?;
    let (oh, ow) = (pooled_extent(h)?, pooled_extent(w)?);
    let x = input.data();
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Real>(input_dims: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = match *input_dims {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape("avg pool backward expects NCHW input dims")),
    };
    let (oh, ow) = (pooled_extent(h)?, pooled_extent(w)?);
    if grad_out.len() != n * c * oh * ow {
        return Err(Error::shape("avg pool backward: gradient length mismatch"));
    }
    let quarter = T::from_f64_lossy(0.25);
    let g = grad_out.data();
    let mut gx = Tensor::zeros(input_dims);
    let d = gx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let share = g[(plane * oh + oy) * ow + ox] * quarter;
                let i = base + 2 * oy * w + 2 * ox;
                for j in [i, i + 1, i + w, i + w + 1] {
                    d[j] = d[j] + share;
                }
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2(&x).unwrap().output.data(), &[4.0]);
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn odd_extent_is_floored() {
        let x = Tensor::<f32>::zeros(&[1, 2, 49, 49]);
        assert_eq!(max_pool2(&x).unwrap().output.dims(), &[1, 2, 24, 24]);
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert_eq!(avg_pool2(&x).unwrap().dims(), &[1, 1, 1, 1]);
    }

    #[test]
    fn too_small_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 4]);
        assert!(max_pool2(&x).is_err());
        assert!(avg_pool2(&x).is_err());
    }

    #[test]
    fn max_backward_routes_to_winner() {
        let x = Tensor::new(&[1, 1, 2, 3], vec![1.0f32, 9.0, 5.0, 2.0, 3.0, 7.0]).unwrap();
        let p = max_pool2(&x).unwrap();
        let g = Tensor::new(&[1, 1, 1, 1], vec![1.5f32]).unwrap();
        let gx = max_pool2_backward(x.dims(), &p.argmax, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.5, 0.0, 0.0, 0.0, 0.0]);
    }
}
