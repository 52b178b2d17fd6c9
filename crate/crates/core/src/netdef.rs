//! Declarative sequential layer graphs for the three stage networks.
//!
//! A [`NetworkDef`] holds every architectural number; weights are looked up
//! by the name convention `"{net}.{layer_index}.{param}"`.

use std::fmt;

use crate::error::{Error, Result};
use crate::ops::pooled_extent;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// 3×3 convolution, stride 1, same padding. Input channels are inferred.
    Conv3x3 { out_channels: usize },
    BatchNorm,
    Relu,
    MaxPool2,
    AvgPool2,
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize },
    Softmax,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv3x3 { out_channels } => write!(f, "conv3x3({out_channels})"),
            LayerSpec::BatchNorm => f.write_str("batchnorm"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2 => f.write_str("maxpool2"),
            LayerSpec::AvgPool2 => f.write_str("avgpool2"),
            LayerSpec::Dropout { rate } => write!(f, "dropout({rate})"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dense { units } => write!(f, "dense({units})"),
            LayerSpec::Softmax => f.write_str("softmax"),
        }
    }
}

/// Activation shape between layers (batch dimension excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { channels, height, width } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Spatial { channels, height, width } => vec![channels, height, width],
            Shape::Flat(n) => vec![n],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Spatial { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Weight,
    Bias,
    Gamma,
    Beta,
    MovingMean,
    MovingVar,
}

impl ParamKind {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Kernel => "kernel",
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::MovingMean => "moving_mean",
            ParamKind::MovingVar => "moving_var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::MovingMean | ParamKind::MovingVar)
    }

    /// Parameters that receive the L2 penalty.
    pub fn is_regularized(self) -> bool {
        matches!(self, ParamKind::Kernel | ParamKind::Weight)
    }

    pub fn from_name(name: &str) -> Option<ParamKind> {
        let suffix = name.rsplit('.').next()?;
        [
            ParamKind::Kernel,
            ParamKind::Weight,
            ParamKind::Bias,
            ParamKind::Gamma,
            ParamKind::Beta,
            ParamKind::MovingMean,
            ParamKind::MovingVar,
        ]
        .into_iter()
        .find(|k| k.suffix() == suffix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub layer: usize,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDef {
    pub name: String,
    /// (channels, height, width)
    pub input_dims: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl NetworkDef {
    /// Builds and validates a definition.
    pub fn new(
        name: impl Into<String>,
        input_dims: [usize; 3],
        layers: Vec<LayerSpec>,
        class_count: usize,
    ) -> Result<Self> {
        let def = NetworkDef {
            name: name.into(),
            input_dims,
            layers,
            class_count,
        };
        def.validate()?;
        Ok(def)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid(format!(
                "{}: class_count must be >= 2, got {}",
                self.name, self.class_count
            )));
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::invalid(format!("{}: final layer must be softmax", self.name)));
        }
        let shapes = self.shapes()?;
        let out = shapes.last().copied().unwrap_or(self.input_shape());
        if out != Shape::Flat(self.class_count) {
            return Err(Error::invalid(format!(
                "{}: network output {out} does not match {} classes",
                self.name, self.class_count
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        let [channels, height, width] = self.input_dims;
        Shape::Spatial { channels, height, width }
    }

    /// Output shape of every layer, index-aligned with `layers`.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut cur = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |why: &str| Error::shape(format!("{}.{i} ({layer}): {why}, input {cur}", self.name));
            cur = match (layer, cur) {
                (LayerSpec::Conv3x3 { out_channels }, Shape::Spatial { height, width, .. }) => {
                    if *out_channels == 0 {
                        return Err(err("zero output channels"));
                    }
                    Shape::Spatial { channels: *out_channels, height, width }
                }
                (LayerSpec::MaxPool2 | LayerSpec::AvgPool2, Shape::Spatial { channels, height, width }) => {
                    Shape::Spatial {
                        channels,
                        height: pooled_extent(height).map_err(|_| err("spatial extent below 2"))?,
                        width: pooled_extent(width).map_err(|_| err("spatial extent below 2"))?,
                    }
                }
                (LayerSpec::BatchNorm, s @ Shape::Spatial { .. }) => s,
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(err("dropout rate outside [0, 1)"));
                    }
                    s
                }
                (LayerSpec::Flatten, s) => Shape::Flat(s.len()),
                (LayerSpec::Dense { units }, Shape::Flat(_)) if *units > 0 => Shape::Flat(*units),
                (LayerSpec::Softmax, s @ Shape::Flat(_)) => s,
                _ => return Err(err("layer not applicable to this input")),
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Spatial extents seen by the network: the input height followed by the
    /// height after each pooling layer.
    pub fn spatial_trace(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        let mut trace = vec![self.input_dims[1]];
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            if let (LayerSpec::MaxPool2 | LayerSpec::AvgPool2, Shape::Spatial { height, .. }) = (layer, shape) {
                trace.push(*height);
            }
        }
        Ok(trace)
    }

    pub fn param_name(&self, layer: usize, kind: ParamKind) -> String {
        format!("{}.{layer}.{}", self.name, kind.suffix())
    }

    /// Every parameter tensor in definition order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let shapes = self.shapes()?;
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { self.input_shape() } else { shapes[i - 1] };
            let mut push = |kind: ParamKind, dims: Vec<usize>| {
                specs.push(ParamSpec {
                    name: self.param_name(i, kind),
                    layer: i,
                    kind,
                    dims,
                })
            };
            match (layer, input) {
                (LayerSpec::Conv3x3 { out_channels }, Shape::Spatial { channels, .. }) => {
                    push(ParamKind::Kernel, vec![*out_channels, channels, 3, 3]);
                    push(ParamKind::Bias, vec![*out_channels]);
                }
                (LayerSpec::BatchNorm, Shape::Spatial { channels, .. }) => {
                    for kind in [ParamKind::Gamma, ParamKind::Beta, ParamKind::MovingMean, ParamKind::MovingVar] {
                        push(kind, vec![channels]);
                    }
                }
                (LayerSpec::Dense { units }, Shape::Flat(inner)) => {
                    push(ParamKind::Weight, vec![*units, inner]);
                    push(ParamKind::Bias, vec![*units]);
                }
                _ => {}
            }
        }
        Ok(specs)
    }
}

/// Counts parameters: conv `9·in·out + out`, batchnorm 4 per channel (2 of
/// them non-trainable moving statistics), dense `in·units + units`.
pub fn count_params(def: &NetworkDef) -> Result<ParamCount> {
    let mut count = ParamCount::default();
    for spec in def.param_specs()? {
        count.total += spec.len();
        if spec.kind.is_trainable() {
            count.trainable += spec.len();
        } else {
            count.non_trainable += spec.len();
        }
    }
    Ok(count)
}

fn cbr(layers: &mut Vec<LayerSpec>, out_channels: usize) {
    layers.push(LayerSpec::Conv3x3 { out_channels });
    layers.push(LayerSpec::BatchNorm);
    layers.push(LayerSpec::Relu);
}

fn classifier_head(layers: &mut Vec<LayerSpec>, class_count: usize) {
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense { units: class_count });
    layers.push(LayerSpec::Softmax);
}

const S_CHANNELS: [usize; 5] = [64, 128, 160, 224, 256];
const W_CHANNELS: [usize; 7] = [64, 128, 160, 192, 224, 320, 256];
const W_DROPOUTS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn s_layers(channels: [usize; 5], class_count: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    cbr(&mut layers, channels[0]);
    layers.push(LayerSpec::MaxPool2);
    cbr(&mut layers, channels[1]);
    layers.push(LayerSpec::MaxPool2);
    layers.push(LayerSpec::Dropout { rate: 0.1 });
    cbr(&mut layers, channels[2]);
    layers.push(LayerSpec::MaxPool2);
    layers.push(LayerSpec::Dropout { rate: 0.2 });
    cbr(&mut layers, channels[3]);
    layers.push(LayerSpec::MaxPool2);
    layers.push(LayerSpec::Dropout { rate: 0.3 });
    cbr(&mut layers, channels[4]);
    layers.push(LayerSpec::AvgPool2);
    layers.push(LayerSpec::Dropout { rate: 0.4 });
    classifier_head(&mut layers, class_count);
    layers
}

/// Silhouette network: binarized 1×128×128 input, five CBR blocks.
pub fn build_s_leafnet(class_count: usize) -> Result<NetworkDef> {
    NetworkDef::new("s_leafnet", [1, 128, 128], s_layers(S_CHANNELS, class_count), class_count)
}

/// Same layer pattern as [`build_s_leafnet`] with every channel count divided
/// by `width_divisor` and an arbitrary square input size. Used for desk-scale
/// training experiments.
pub fn build_s_leafnet_scaled(class_count: usize, input_px: usize, width_divisor: usize) -> Result<NetworkDef> {
    if width_divisor == 0 {
        return Err(Error::invalid("width divisor must be >= 1"));
    }
    let channels = S_CHANNELS.map(|c| (c / width_divisor).max(1));
    NetworkDef::new("s_leafnet", [1, input_px, input_px], s_layers(channels, class_count), class_count)
}

fn w_layers(class_count: usize, final_pool: bool) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    cbr(&mut layers, W_CHANNELS[0]);
    layers.push(LayerSpec::MaxPool2);
    for (&ch, &rate) in W_CHANNELS[1..6].iter().zip(&W_DROPOUTS) {
        cbr(&mut layers, ch);
        layers.push(LayerSpec::MaxPool2);
        layers.push(LayerSpec::Dropout { rate });
    }
    cbr(&mut layers, W_CHANNELS[6]);
    if final_pool {
        layers.push(LayerSpec::MaxPool2);
    }
    classifier_head(&mut layers, class_count);
    layers
}

/// Whole-leaf RGB network: 3×196×196 input, seven CBR blocks, all max pooling.
pub fn build_w_leafnet(class_count: usize) -> Result<NetworkDef> {
    NetworkDef::new("w_leafnet", [3, 196, 196], w_layers(class_count, true), class_count)
}

/// In-process patch classifier on 3×96×96 patches, following the whole-leaf
/// layer pattern. The final pooling layer is omitted because six halvings
/// already reach 1×1.
pub fn build_p_fallback(class_count: usize) -> Result<NetworkDef> {
    NetworkDef::new("p_fallback", [3, 96, 96], w_layers(class_count, false), class_count)
}

pub fn build_by_name(net: &str, class_count: usize) -> Result<NetworkDef> {
    match net {
        "s" | "s_leafnet" => build_s_leafnet(class_count),
        "w" | "w_leafnet" => build_w_leafnet(class_count),
        "p" | "p_fallback" => build_p_fallback(class_count),
        other => Err(Error::invalid(format!("unknown network {other:?} (expected s, w or p)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_single_dense_counts() {
        let def = NetworkDef {
            name: "t".into(),
            input_dims: [1, 1, 10],
            layers: vec![],
            class_count: 2,
        };
        assert_eq!(count_params(&def).unwrap(), ParamCount::default());
        let def = NetworkDef::new(
            "t",
            [1, 1, 10],
            vec![LayerSpec::Flatten, LayerSpec::Dense { units: 5 }, LayerSpec::Softmax],
            5,
        )
        .unwrap();
        let c = count_params(&def).unwrap();
        assert_eq!((c.total, c.trainable, c.non_trainable), (55, 55, 0));
    }

    #[test]
    fn s_leafnet_32_classes() {
        let c = count_params(&build_s_leafnet(32).unwrap()).unwrap();
        assert_eq!(c.total, 1_232_544);
        assert_eq!(c.non_trainable, 1_664);
    }

    #[test]
    fn weight_names_follow_convention() {
        let def = build_s_leafnet(44).unwrap();
        let specs = def.param_specs().unwrap();
        assert_eq!(specs[0].name, "s_leafnet.0.kernel");
        assert_eq!(specs[0].dims, vec![64, 1, 3, 3]);
        assert_eq!(specs[2].name, "s_leafnet.1.gamma");
        assert_eq!(specs.last().unwrap().name, format!("s_leafnet.{}.bias", def.layers.len() - 2));
    }

    #[test]
    fn rejects_bad_definitions() {
        assert!(build_s_leafnet(1).is_err());
        assert!(build_by_name("q", 4).is_err());
        // 3 -> 1 -> pool fails
        let r = NetworkDef::new(
            "t",
            [1, 3, 3],
            vec![LayerSpec::MaxPool2, LayerSpec::MaxPool2, LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
            2,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn p_fallback_reaches_single_pixel() {
        let def = build_p_fallback(10).unwrap();
        assert_eq!(def.spatial_trace().unwrap(), vec![96, 48, 24, 12, 6, 3, 1]);
    }
}
