//! Convolution activations dumped as grayscale images.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::netdef::{LayerSpec, NetworkDef};
use crate::network::{forward_with_tap, Weights};
use crate::preprocess::write_pgm;
use crate::tensor::Tensor;

/// Indices of the convolution layers, in order.
pub fn conv_layers(def: &NetworkDef) -> Vec<usize> {
    def.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv3x3 { .. }))
        .map(|(i, _)| i)
        .collect()
}

/// Min–max scales one channel to 0..=255. A channel with no spread maps to 128.
pub fn normalize_channel(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = f64::from(hi) - f64::from(lo);
    if !(range > 0.0) || !range.is_finite() {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((f64::from(v) - f64::from(lo)) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes every channel of the requested convolution outputs as
/// `layerNN_chCCC.pgm` under `out_dir` and returns the paths in layer, then
/// channel, order. `input` is one image, `(C, H, W)` or `(1, C, H, W)`.
pub fn export_feature_maps(
    def: &NetworkDef,
    weights: &Weights,
    input: &Tensor,
    layer_indices: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let wanted: BTreeSet<usize> = layer_indices.iter().copied().collect();
    for &i in &wanted {
        match def.layers.get(i) {
            Some(LayerSpec::Conv3x3 { .. }) => {}
            Some(other) => return Err(Error::invalid(format!("layer {i} is {other}, not a convolution"))),
            None => return Err(Error::invalid(format!("layer {i} out of range ({} layers)", def.layers.len()))),
        }
    }
    let input = match *input.dims() {
        [c, h, w] => input.clone().reshape(&[1, c, h, w])?,
        [1, _, _, _] => input.clone(),
        ref d => return Err(Error::shape(format!("feature export takes one image, got dims {d:?}"))),
    };
    fs::create_dir_all(out_dir)?;

    let mut maps: Vec<(usize, Tensor)> = Vec::new();
    forward_with_tap(def, weights, &input, |i, out| {
        if wanted.contains(&i) {
            maps.push((i, out.clone()));
        }
    })?;

    let mut written = Vec::new();
    for (layer, t) in maps {
        let [_, channels, h, w] = *t.dims() else {
            return Err(Error::shape(format!("layer {layer} output is not spatial")));
        };
        let plane = h * w;
        for ch in 0..channels {
            let pixels = normalize_channel(&t.data()[ch * plane..(ch + 1) * plane]);
            let path = out_dir.join(format!("layer{layer:02}_ch{ch:03}.pgm"));
            write_pgm(&path, w, h, &pixels)?;
            written.push(path);
        }
    }
    Ok(written)
}
