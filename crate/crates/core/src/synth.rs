//! Seeded synthetic leaves: filled geometric silhouettes on a white
//! background, for tests, demos and the toy training set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::LeafImage;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    /// Whether the point (u, v), in units of the shape's radius around its
    /// unrotated center, lies inside.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            // equilateral, circumradius 1, apex at v = -1, base at v = 0.5
            ShapeKind::Triangle => v <= 0.5 && u.abs() <= (v + 1.0) * (3f64.sqrt() / 3.0),
            ShapeKind::Cross => (u.abs() <= 1.0 && v.abs() <= 0.3) || (u.abs() <= 0.3 && v.abs() <= 1.0),
        }
    }
}

/// Placement of one shape inside a `size`×`size` frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub radius: f64,
    pub angle_rad: f64,
    /// Fill color, RGB in [0, 1].
    pub color: [f32; 3],
}

impl ShapeParams {
    /// Random placement keeping the shape inside the frame.
    pub fn random<R: Rng + ?Sized>(kind: ShapeKind, size: usize, rng: &mut R) -> Self {
        let s = size as f64;
        let radius = rng.gen_range(0.28..0.40) * s;
        let jitter = 0.08 * s;
        let c = (s - 1.0) / 2.0;
        ShapeParams {
            kind,
            center: (c + rng.gen_range(-jitter..=jitter), c + rng.gen_range(-jitter..=jitter)),
            radius,
            angle_rad: rng.gen_range(0.0..std::f64::consts::TAU),
            color: [rng.gen_range(0.05..0.35), rng.gen_range(0.30..0.60), rng.gen_range(0.05..0.30)],
        }
    }

    pub fn mask(&self, height: usize, width: usize) -> Tensor {
        let (sin, cos) = self.angle_rad.sin_cos();
        Tensor::from_fn(&[1, height, width], |i| {
            let (y, x) = ((i / width) as f64 - self.center.1, (i % width) as f64 - self.center.0);
            let u = (cos * x + sin * y) / self.radius;
            let v = (-sin * x + cos * y) / self.radius;
            if self.kind.contains(u, v) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Colored shape on white, with its exact mask.
    pub fn render(&self, height: usize, width: usize) -> Result<LeafImage> {
        let mask = self.mask(height, width);
        let plane = height * width;
        let m = mask.data();
        let rgb = Tensor::from_fn(&[3, height, width], |i| {
            let (ch, p) = (i / plane, i % plane);
            if m[p] > 0.5 {
                self.color[ch]
            } else {
                1.0
            }
        });
        LeafImage::new(rgb, mask)
    }
}

/// `count` images cycling through the four shapes (label = index in
/// [`ShapeKind::ALL`]), `size`×`size` each.
pub fn shapes_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<(LeafImage, usize)>> {
    if size < 8 {
        return Err(Error::invalid("synthetic shapes need at least 8x8 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = i % ShapeKind::ALL.len();
            let leaf = ShapeParams::random(ShapeKind::ALL[label], size, &mut rng).render(size, size)?;
            Ok((leaf, label))
        })
        .collect()
}
