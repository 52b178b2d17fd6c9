//! Seeded geometric augmentation applied identically to an image and its mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Rotation drawn uniformly from ±this many degrees; 0 disables.
    pub max_rotate_deg: f64,
    /// Translation drawn uniformly from ±this fraction of each extent; 0 disables.
    pub max_shift_frac: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentPolicy {
    pub const NONE: AugmentPolicy = AugmentPolicy {
        max_rotate_deg: 0.0,
        max_shift_frac: 0.0,
        hflip: false,
        vflip: false,
    };

    /// 45° rotation, 0.1 shifts on both axes, both mirrors.
    pub const LEAF: AugmentPolicy = AugmentPolicy {
        max_rotate_deg: 45.0,
        max_shift_frac: 0.1,
        hflip: true,
        vflip: true,
    };
}

/// One concrete transform: flip, then rotate about the center, then shift.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Transform {
    pub angle_deg: f64,
    /// Pixels, positive moves content right.
    pub shift_x: f64,
    /// Pixels, positive moves content down.
    pub shift_y: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, height: usize, width: usize, rng: &mut R) -> Self {
        let mut uniform = |max: f64| if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
        let angle_deg = uniform(policy.max_rotate_deg);
        let shift_x = uniform(policy.max_shift_frac * width as f64);
        let shift_y = uniform(policy.max_shift_frac * height as f64);
        Transform {
            angle_deg,
            shift_x,
            shift_y,
            hflip: policy.hflip && rng.gen_bool(0.5),
            vflip: policy.vflip && rng.gen_bool(0.5),
        }
    }

    /// Maps an output pixel center back to source coordinates.
    fn source(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (px, py) = (x - self.shift_x - cx, y - self.shift_y - cy);
        let (sin, cos) = if self.angle_deg == 0.0 {
            (0.0, 1.0)
        } else {
            (-self.angle_deg).to_radians().sin_cos()
        };
        let mut sx = cos * px - sin * py + cx;
        let mut sy = sin * px + cos * py + cy;
        if self.hflip {
            sx = w as f64 - 1.0 - sx;
        }
        if self.vflip {
            sy = h as f64 - 1.0 - sy;
        }
        (sx, sy)
    }

    /// Bilinear resampling for the image, nearest for the mask; pixels that
    /// map outside the frame become 0.
    pub fn apply(&self, image: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let [_, c, h, w] = image.nchw()?;
        let [_, mc, mh, mw] = mask.nchw()?;
        if (mh, mw) != (h, w) || mc != 1 {
            return Err(Error::shape("augment: mask must be 1xHxW matching the image"));
        }
        let eps = 1e-9;
        let src = image.data();
        let msrc = mask.data();
        let mut out = vec![0.0f32; c * h * w];
        let mut mout = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x as f64, y as f64, h, w);
                if sx < -eps || sy < -eps || sx > w as f64 - 1.0 + eps || sy > h as f64 - 1.0 + eps {
                    continue;
                }
                let sx = sx.clamp(0.0, w as f64 - 1.0);
                let sy = sy.clamp(0.0, h as f64 - 1.0);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                for ch in 0..c {
                    let p = &src[ch * h * w..(ch + 1) * h * w];
                    let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                    let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                    out[(ch * h + y) * w + x] = top * (1.0 - fy) + bottom * fy;
                }
                let (nx, ny) = (sx.round() as usize, sy.round() as usize);
                mout[y * w + x] = msrc[ny.min(h - 1) * w + nx.min(w - 1)];
            }
        }
        Ok((Tensor::new(image.dims(), out)?, Tensor::new(mask.dims(), mout)?))
    }
}

/// Draws a transform from `policy` with `seed` and applies it.
pub fn augment(image: &Tensor, mask: &Tensor, seed: u64, policy: &AugmentPolicy) -> Result<(Tensor, Tensor)> {
    let [_, _, h, w] = image.nchw()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Transform::sample(policy, h, w, &mut rng).apply(image, mask)
}
