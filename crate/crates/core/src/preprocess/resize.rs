use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn source_coord(out: usize, out_len: usize, in_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64)
}

fn chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.nchw()? {
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected a single image, got {:?}", image.dims()))),
    }
}

/// Bilinear resize with half-pixel centers. Output keeps the input's rank.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let src = image.data();
    let xs: Vec<(usize, usize, f32)> = (0..width)
        .map(|x| {
            let sx = source_coord(x, width, w);
            let x0 = sx.floor() as usize;
            (x0, (x0 + 1).min(w - 1), (sx - x0 as f64) as f32)
        })
        .collect();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..height {
            let sy = source_coord(y, height, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = (sy - y0 as f64) as f32;
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let mut dims = image.dims().to_vec();
    let r = dims.len();
    dims[r - 2] = height;
    dims[r - 1] = width;
    Tensor::new(&dims, out)
}

/// Nearest-neighbor resize, used for masks so they stay binary.
pub fn resize_nearest(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = chw(image)?;
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    let pick = |o: usize, out_len: usize, in_len: usize| {
        (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let src = image.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let sy = pick(y, height, h);
            for x in 0..width {
                out.push(src[(ch * h + sy) * w + pick(x, width, w)]);
            }
        }
    }
    let mut dims = image.dims().to_vec();
    let r = dims.len();
    dims[r - 2] = height;
    dims[r - 1] = width;
    Tensor::new(&dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let img = Tensor::from_fn(&[3, 7, 5], |i| (i as f32 * 0.13).sin().abs());
        assert_eq!(resize_bilinear(&img, 7, 5).unwrap(), img);
        assert_eq!(resize_nearest(&img, 7, 5).unwrap(), img);
    }

    #[test]
    fn checkerboard_averages() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize_bilinear(&img, 1, 1).unwrap().data(), &[0.5]);
    }

    // Scalar reference: explicit four-neighbor interpolation in f64.
    fn reference(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let mut out = vec![];
        for y in 0..oh {
            for x in 0..ow {
                let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0).min((h - 1) as f64);
                let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0).min((w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = plane[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + plane[y0 * w + x1] * (1.0 - fy) * fx
                    + plane[y1 * w + x0] * fy * (1.0 - fx)
                    + plane[y1 * w + x1] * fy * fx;
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn gradient_downscale_matches_reference() {
        let (h, w) = (37, 53);
        let plane: Vec<f64> = (0..h * w).map(|i| ((i / w) as f64 / h as f64 + (i % w) as f64 / w as f64) / 2.0).collect();
        let img = Tensor::new(&[1, h, w], plane.iter().map(|&v| v as f32).collect()).unwrap();
        let got = resize_bilinear(&img, 11, 19).unwrap();
        let want = reference(&plane, h, w, 11, 19);
        for (g, r) in got.data().iter().zip(&want) {
            assert!((f64::from(*g) - r).abs() < 1e-4);
        }
    }

    #[test]
    fn nearest_keeps_mask_binary() {
        let mask = Tensor::from_fn(&[1, 9, 9], |i| if (i / 9 + i % 9) % 3 == 0 { 1.0 } else { 0.0 });
        let r = resize_nearest(&mask, 4, 13).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
