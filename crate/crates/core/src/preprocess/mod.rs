//! Image ingestion and the per-stage input pipelines.

mod augment;
mod binarize;
pub mod dataset;
mod patches;
mod resize;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use augment::{augment, AugmentPolicy, Transform};
pub use binarize::{binarize, luminance_u8, otsu_threshold};
pub use patches::{extract_patches, sample_patches, PatchSet, TRIES_PER_PATCH};
pub use resize::{resize_bilinear, resize_nearest};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB leaf photograph with its binary silhouette.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafImage {
    /// 3×H×W, values in [0, 1].
    pub rgb: Tensor,
    /// 1×H×W, 1 = leaf.
    pub mask: Tensor,
}

impl LeafImage {
    pub fn new(rgb: Tensor, mask: Tensor) -> Result<Self> {
        let [_, c, h, w] = rgb.nchw()?;
        let [_, mc, mh, mw] = mask.nchw()?;
        if c != 3 || mc != 1 || (h, w) != (mh, mw) {
            return Err(Error::shape(format!(
                "leaf image needs 3xHxW rgb and 1xHxW mask, got {:?} and {:?}",
                rgb.dims(),
                mask.dims()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(LeafImage {
            rgb: rgb.reshape(&[3, h, w])?,
            mask: mask.reshape(&[1, h, w])?,
        })
    }

    /// Segments `rgb` with [`binarize`].
    pub fn from_rgb(rgb: Tensor) -> Result<Self> {
        let mask = binarize(&rgb)?;
        LeafImage::new(rgb, mask)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.rgb.dims()[1], self.rgb.dims()[2])
    }

    /// Silhouette resized to `dims` (channels must be 1), as a batch of one.
    pub fn silhouette_input(&self, dims: [usize; 3]) -> Result<Tensor> {
        if dims[0] != 1 {
            return Err(Error::shape(format!("silhouette input must have 1 channel, got {}", dims[0])));
        }
        resize_nearest(&self.mask, dims[1], dims[2])?.reshape(&[1, 1, dims[1], dims[2]])
    }

    /// RGB image resized to `dims` (channels must be 3), as a batch of one.
    pub fn color_input(&self, dims: [usize; 3]) -> Result<Tensor> {
        if dims[0] != 3 {
            return Err(Error::shape(format!("color input must have 3 channels, got {}", dims[0])));
        }
        resize_bilinear(&self.rgb, dims[1], dims[2])?.reshape(&[1, 3, dims[1], dims[2]])
    }

    /// Silhouette for one-channel inputs, RGB for three-channel inputs.
    pub fn input_for(&self, dims: [usize; 3]) -> Result<Tensor> {
        match dims[0] {
            1 => self.silhouette_input(dims),
            _ => self.color_input(dims),
        }
    }
}

/// Reads PNG/PGM/PPM into a 3×H×W tensor with bytes divided by 255.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = f32::from(px[ch]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3×H×W tensor in [0, 1] as PNG.
pub fn save_rgb_png(path: &Path, rgb: &Tensor) -> Result<()> {
    let [_, c, h, w] = rgb.nchw()?;
    if c != 3 {
        return Err(Error::shape("save_rgb_png needs 3 channels"));
    }
    let d = rgb.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            raw.push(to_byte(d[ch * h * w + i]));
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized to image")
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("pgm pixel count does not match dimensions"));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Parses a binary (P5) 8-bit PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Protocol(format!("{}: not an 8-bit P5 PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let px = bytes.get(pos..pos + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, px))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_image_validates_mask() {
        let rgb = Tensor::zeros(&[3, 4, 4]);
        assert!(LeafImage::new(rgb.clone(), Tensor::full(&[1, 4, 4], 0.5)).is_err());
        assert!(LeafImage::new(rgb.clone(), Tensor::zeros(&[1, 4, 5])).is_err());
        assert!(LeafImage::new(rgb, Tensor::zeros(&[1, 4, 4])).is_ok());
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Tensor::from_fn(&[3, 5, 6], |i| ((i * 17) % 256) as f32 / 255.0);
        let p = dir.path().join("a.png");
        save_rgb_png(&p, &rgb).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), rgb);

        let q = dir.path().join("b.pgm");
        let px: Vec<u8> = (0..30).collect();
        write_pgm(&q, 6, 5, &px).unwrap();
        assert_eq!(read_pgm(&q).unwrap(), (6, 5, px));
        // the image crate reads our PGM too
        let back = load_rgb(&q).unwrap();
        assert_eq!(back.dims(), &[3, 5, 6]);
    }

    #[test]
    fn stage_inputs_have_batch_of_one() {
        let rgb = Tensor::from_fn(&[3, 20, 30], |i| (i % 5) as f32 / 5.0);
        let mask = Tensor::from_fn(&[1, 20, 30], |i| (i % 2) as f32);
        let leaf = LeafImage::new(rgb, mask).unwrap();
        assert_eq!(leaf.silhouette_input([1, 8, 8]).unwrap().dims(), &[1, 1, 8, 8]);
        assert_eq!(leaf.color_input([3, 16, 16]).unwrap().dims(), &[1, 3, 16, 16]);
        assert!(leaf.color_input([1, 16, 16]).is_err());
    }
}
