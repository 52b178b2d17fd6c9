//! Leaf silhouette extraction: Otsu threshold on luminance, polarity chosen by
//! border contact, largest component kept, interior holes filled.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rec. 601 luminance quantized to 0..=255, one byte per pixel.
pub fn luminance_u8(rgb: &Tensor) -> Result<(Vec<u8>, usize, usize)> {
    let [n, c, h, w] = rgb.nchw()?;
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::shape(format!("expected a 1- or 3-channel image, got {:?}", rgb.dims())));
    }
    let d = rgb.data();
    let hw = h * w;
    let lum = (0..hw)
        .map(|i| {
            let l = if c == 1 {
                f64::from(d[i])
            } else {
                0.299 * f64::from(d[i]) + 0.587 * f64::from(d[hw + i]) + 0.114 * f64::from(d[2 * hw + i])
            };
            (l.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok((lum, h, w))
}

/// Otsu threshold over a 256-bin histogram. Pixels `<= t` form one class and
/// pixels `> t` the other. `None` when all pixels share one bin.
pub fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w_low, mut sum_low) = (0.0, 0.0);
    let mut best = (f64::MIN, 0u8);
    for t in 0..255usize {
        w_low += hist[t] as f64;
        sum_low += t as f64 * hist[t] as f64;
        let w_high = total - w_low;
        if w_low == 0.0 || w_high == 0.0 {
            continue;
        }
        let diff = sum_low / w_low - (sum_all - sum_low) / w_high;
        let between = w_low * w_high * diff * diff;
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

fn border_indices(h: usize, w: usize) -> impl Iterator<Item = usize> {
    (0..h).flat_map(move |y| {
        (0..w).filter_map(move |x| (y == 0 || x == 0 || y + 1 == h || x + 1 == w).then_some(y * w + x))
    })
}

/// Labels 8-connected components of `fg`, returning the largest one.
fn largest_component(fg: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0u32; fg.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.1).collect()
}

/// Sets every background pixel not 4-connected to the image border.
fn fill_holes(fg: &mut [bool], h: usize, w: usize) {
    let mut outside = vec![false; fg.len()];
    let mut queue: VecDeque<usize> = border_indices(h, w).filter(|&i| !fg[i]).collect();
    for &i in &queue {
        outside[i] = true;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !fg[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    for (f, o) in fg.iter_mut().zip(outside) {
        *f = !o;
    }
}

/// Produces a 1×H×W mask with 1 on the leaf and 0 on the background.
pub fn binarize(image: &Tensor) -> Result<Tensor> {
    let (lum, h, w) = luminance_u8(image)?;
    let t = otsu_threshold(&lum).ok_or(Error::NoForeground)?;
    let bright: Vec<bool> = lum.iter().map(|&v| v > t).collect();

    let border: Vec<usize> = border_indices(h, w).collect();
    let bright_contact = border.iter().filter(|&&i| bright[i]).count();
    let dark_contact = border.len() - bright_contact;
    let bright_area = bright.iter().filter(|&&b| b).count();
    let dark_area = bright.len() - bright_area;
    let bright_is_leaf = match bright_contact.cmp(&dark_contact) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => bright_area <= dark_area,
    };
    let fg: Vec<bool> = bright.iter().map(|&b| b == bright_is_leaf).collect();

    let mut leaf = largest_component(&fg, h, w);
    fill_holes(&mut leaf, h, w);
    if !leaf.iter().any(|&b| b) {
        return Err(Error::NoForeground);
    }
    Tensor::new(&[1, h, w], leaf.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse(h: usize, w: usize, dark_on_light: bool) -> (Tensor, Vec<f32>) {
        let (cy, cx, ry, rx) = (h as f64 / 2.0, w as f64 / 2.0, h as f64 * 0.3, w as f64 * 0.4);
        let truth: Vec<f32> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
                let inside = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0;
                if inside { 1.0 } else { 0.0 }
            })
            .collect();
        let (fg, bg) = if dark_on_light { ([0.2, 0.45, 0.1], 0.97) } else { ([0.9, 0.8, 0.95], 0.05) };
        let mut data = Vec::with_capacity(3 * h * w);
        for ch in 0..3 {
            data.extend(truth.iter().map(|&t| if t > 0.5 { fg[ch] } else { bg }));
        }
        (Tensor::new(&[3, h, w], data).unwrap(), truth)
    }

    fn agreement(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
    }

    #[test]
    fn dark_ellipse_on_white() {
        let (img, truth) = ellipse(90, 120, true);
        let mask = binarize(&img).unwrap();
        assert_eq!(mask.dims(), &[1, 90, 120]);
        assert!(agreement(mask.data(), &truth) >= 0.99);
    }

    #[test]
    fn polarity_is_invariant_to_inversion() {
        let (img, _) = ellipse(64, 80, true);
        let inv = img.map(|v| 1.0 - v);
        assert_eq!(binarize(&img).unwrap(), binarize(&inv).unwrap());
        let (bright, truth) = ellipse(64, 80, false);
        assert!(agreement(binarize(&bright).unwrap().data(), &truth) >= 0.99);
    }

    #[test]
    fn constant_image_has_no_foreground() {
        let white = Tensor::full(&[3, 16, 16], 1.0);
        assert!(matches!(binarize(&white), Err(Error::NoForeground)));
    }

    #[test]
    fn holes_are_filled_and_specks_dropped() {
        let (h, w) = (40, 40);
        let mut lum = vec![1.0f32; h * w];
        for y in 8..32 {
            for x in 8..32 {
                lum[y * w + x] = 0.0;
            }
        }
        for y in 18..22 {
            for x in 18..22 {
                lum[y * w + x] = 1.0; // hole
            }
        }
        lum[2 * w + 2] = 0.0; // speck
        let mask = binarize(&Tensor::new(&[1, h, w], lum).unwrap()).unwrap();
        let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 24 * 24);
        assert_eq!(mask.data()[20 * w + 20], 1.0);
        assert_eq!(mask.data()[2 * w + 2], 0.0);
    }

    #[test]
    fn rebinarizing_a_mask_is_idempotent() {
        let (img, _) = ellipse(50, 70, true);
        let mask = binarize(&img).unwrap();
        assert_eq!(binarize(&mask).unwrap(), mask);
    }
}
