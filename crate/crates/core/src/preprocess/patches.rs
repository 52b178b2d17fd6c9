//! In-leaf patch sampling for the patch-level stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LeafImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Candidate windows tried per requested patch.
pub const TRIES_PER_PATCH: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// Each 3×patch_px×patch_px.
    pub patches: Vec<Tensor>,
    /// Top-left (row, col) of each window in the source image.
    pub origins: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Summed-area table over a binary mask for O(1) window counts.
struct Integral {
    w: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &[f32], h: usize, w: usize) -> Self {
        let mut sums = vec![0u32; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += u32::from(mask[y * w + x] > 0.5);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, sums }
    }

    fn count(&self, row: usize, col: usize, size: usize) -> u32 {
        let s = self.w + 1;
        let (r0, c0, r1, c1) = (row, col, row + size, col + size);
        self.sums[r1 * s + c1] + self.sums[r0 * s + c0] - self.sums[r0 * s + c1] - self.sums[r1 * s + c0]
    }
}

fn crop(rgb: &Tensor, row: usize, col: usize, size: usize) -> Tensor {
    let [_, c, h, w] = rgb.nchw().expect("validated image");
    let src = rgb.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in row..row + size {
            let start = (ch * h + y) * w + col;
            out.extend_from_slice(&src[start..start + size]);
        }
    }
    Tensor::new(&[c, size, size], out).expect("crop dims")
}

/// Samples up to `count` windows whose leaf coverage is at least
/// `min_leaf_fraction`, returning however many were found.
pub fn sample_patches(
    leaf: &LeafImage,
    count: usize,
    patch_px: usize,
    min_leaf_fraction: f64,
    seed: u64,
) -> Result<PatchSet> {
    if count == 0 || patch_px == 0 {
        return Err(Error::invalid("patch count and size must be >= 1"));
    }
    if !(min_leaf_fraction > 0.0 && min_leaf_fraction <= 1.0) {
        return Err(Error::invalid(format!("min_leaf_fraction {min_leaf_fraction} outside (0, 1]")));
    }
    let (h, w) = leaf.size();
    let mut set = PatchSet { patches: vec![], origins: vec![] };
    if h < patch_px || w < patch_px {
        return Ok(set);
    }
    let area = (patch_px * patch_px) as f64;
    let required = (min_leaf_fraction * area).ceil() as u32;
    let integral = Integral::new(leaf.mask.data(), h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..TRIES_PER_PATCH * count {
        if set.len() == count {
            break;
        }
        let row = rng.gen_range(0..=h - patch_px);
        let col = rng.gen_range(0..=w - patch_px);
        if integral.count(row, col, patch_px) < required || set.origins.contains(&(row, col)) {
            continue;
        }
        set.patches.push(crop(&leaf.rgb, row, col, patch_px));
        set.origins.push((row, col));
    }
    Ok(set)
}

/// Like [`sample_patches`] but fails with [`Error::PatchShortfall`] unless
/// exactly `count` windows were accepted.
pub fn extract_patches(
    leaf: &LeafImage,
    count: usize,
    patch_px: usize,
    min_leaf_fraction: f64,
    seed: u64,
) -> Result<PatchSet> {
    let set = sample_patches(leaf, count, patch_px, min_leaf_fraction, seed)?;
    if set.len() < count {
        return Err(Error::PatchShortfall { found: set.len(), requested: count });
    }
    Ok(set)
}
