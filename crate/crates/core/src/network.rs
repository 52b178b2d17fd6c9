//! Sequential evaluation of a [`NetworkDef`] against named weights, with a
//! recorded trace for backpropagation.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netdef::{LayerSpec, NetworkDef, ParamKind};
use crate::ops::{self, BatchNormCache, BatchNormParams, ConvParams, Mode};
use crate::tensor::{Real, Tensor};

/// Named parameter tensors in canonical (definition) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Weights<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Weights<T> {
    pub fn new() -> Self {
        Weights { entries: IndexMap::new() }
    }

    /// Zero kernels and biases, unit gamma, zero beta, moving stats (0, 1).
    pub fn zeros_for(def: &NetworkDef) -> Result<Self> {
        let mut w = Weights::new();
        for spec in def.param_specs()? {
            let t = match spec.kind {
                ParamKind::Gamma | ParamKind::MovingVar => Tensor::full(&spec.dims, T::one()),
                _ => Tensor::zeros(&spec.dims),
            };
            w.insert(spec.name, t);
        }
        Ok(w)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::Weights {
            layer: name.to_string(),
            reason: "missing entry".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Verifies every parameter the definition needs is present with the right shape.
    pub fn check_against(&self, def: &NetworkDef) -> Result<()> {
        for spec in def.param_specs()? {
            let t = self.require(&spec.name)?;
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::Weights {
                    layer: spec.name,
                    reason: format!("dims {:?}, expected {:?}", t.dims(), spec.dims),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum LayerCache<T> {
    Conv { input: Tensor<T> },
    BatchNorm { cache: BatchNormCache<T> },
    Relu { input: Tensor<T> },
    MaxPool { input_dims: Vec<usize>, argmax: Vec<usize> },
    AvgPool { input_dims: Vec<usize> },
    Dropout { mask: Option<Tensor<T>> },
    Flatten { input_dims: Vec<usize> },
    Dense { input: Tensor<T> },
    Softmax { output: Tensor<T> },
}

/// Everything a backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    caches: Vec<LayerCache<T>>,
    /// Network output: (batch, class_count) probabilities.
    pub output: Tensor<T>,
    /// Logits feeding the final softmax.
    pub logits: Tensor<T>,
    /// Train-mode moving statistics per batchnorm layer: (layer, mean, var).
    pub moving: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

pub enum GradSeed<T> {
    /// Gradient with respect to the softmax output.
    Probs(Tensor<T>),
    /// Gradient with respect to the logits; the final softmax is skipped.
    Logits(Tensor<T>),
}

#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    /// One entry per trainable parameter.
    pub params: Weights<T>,
    pub input: Tensor<T>,
}

fn batchnorm_params<T: Real>(def: &NetworkDef, weights: &Weights<T>, i: usize) -> Result<BatchNormParams<T>> {
    let get = |kind| weights.require(&def.param_name(i, kind)).cloned();
    Ok(BatchNormParams {
        gamma: get(ParamKind::Gamma)?,
        beta: get(ParamKind::Beta)?,
        moving_mean: get(ParamKind::MovingMean)?,
        moving_var: get(ParamKind::MovingVar)?,
        epsilon: ops::DEFAULT_EPSILON,
        momentum: ops::DEFAULT_MOMENTUM,
    })
}

fn layer_err(def: &NetworkDef, i: usize, e: Error) -> Error {
    match e {
        Error::Weights { .. } => e,
        other => Error::Weights {
            layer: format!("{}.{i} ({})", def.name, def.layers[i]),
            reason: other.to_string(),
        },
    }
}

fn check_input<T: Real>(def: &NetworkDef, input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.nchw()?;
    if [c, h, w] != def.input_dims {
        return Err(Error::shape(format!(
            "{} expects input {:?}, got {:?}",
            def.name,
            def.input_dims,
            input.dims()
        )));
    }
    input.clone().reshape(&[n, c, h, w])
}

/// Runs every layer. `tap` sees each layer's output; caches are kept only when `record` is set.
fn run<T: Real, R: Rng + ?Sized>(
    def: &NetworkDef,
    weights: &Weights<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
    record: bool,
    mut tap: impl FnMut(usize, &Tensor<T>),
) -> Result<Trace<T>> {
    let mut x = check_input(def, input)?;
    let mut caches = Vec::with_capacity(if record { def.layers.len() } else { 0 });
    let mut moving = Vec::new();
    let mut logits = None;
    for (i, layer) in def.layers.iter().enumerate() {
        let (y, cache) = (|| -> Result<(Tensor<T>, LayerCache<T>)> {
            Ok(match layer {
                LayerSpec::Conv3x3 { .. } => {
                    let kernel = weights.require(&def.param_name(i, ParamKind::Kernel))?;
                    let bias = weights.require(&def.param_name(i, ParamKind::Bias))?;
                    let y = ops::conv2d_forward(&x, &ConvParams::new(kernel, bias)?)?;
                    (y, LayerCache::Conv { input: if record { x.clone() } else { empty() } })
                }
                LayerSpec::BatchNorm => {
                    let params = batchnorm_params(def, weights, i)?;
                    let out = ops::batchnorm_forward(&x, &params, mode)?;
                    if let Some((m, v)) = out.moving {
                        moving.push((i, m, v));
                    }
                    (out.output, LayerCache::BatchNorm { cache: out.cache })
                }
                LayerSpec::Relu => (ops::relu(&x), LayerCache::Relu { input: if record { x.clone() } else { empty() } }),
                LayerSpec::MaxPool2 => {
                    let out = ops::max_pool2(&x)?;
                    (out.output, LayerCache::MaxPool { input_dims: x.dims().to_vec(), argmax: out.argmax })
                }
                LayerSpec::AvgPool2 => (ops::avg_pool2(&x)?, LayerCache::AvgPool { input_dims: x.dims().to_vec() }),
                LayerSpec::Dropout { rate } => {
                    let (y, mask) = ops::dropout(&x, *rate, mode, rng)?;
                    (y, LayerCache::Dropout { mask })
                }
                LayerSpec::Flatten => {
                    let n = x.dims()[0];
                    let f = x.len() / n;
                    let dims = x.dims().to_vec();
                    (x.clone().reshape(&[n, f])?, LayerCache::Flatten { input_dims: dims })
                }
                LayerSpec::Dense { .. } => {
                    let w = weights.require(&def.param_name(i, ParamKind::Weight))?;
                    let b = weights.require(&def.param_name(i, ParamKind::Bias))?;
                    let y = ops::dense_forward(&x, w, b)?;
                    (y, LayerCache::Dense { input: if record { x.clone() } else { empty() } })
                }
                LayerSpec::Softmax => {
                    logits = Some(x.clone());
                    let y = ops::softmax(&x);
                    let cache = LayerCache::Softmax { output: if record { y.clone() } else { empty() } };
                    (y, cache)
                }
            })
        })()
        .map_err(|e| layer_err(def, i, e))?;
        tap(i, &y);
        if record {
            caches.push(cache);
        }
        x = y;
    }
    Ok(Trace {
        caches,
        logits: logits.unwrap_or_else(|| x.clone()),
        output: x,
        moving,
    })
}

fn empty<T: Real>() -> Tensor<T> {
    Tensor::zeros(&[1])
}

/// Forward pass recording everything [`backward`] needs.
pub fn forward_trace<T: Real, R: Rng + ?Sized>(
    def: &NetworkDef,
    weights: &Weights<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<Trace<T>> {
    run(def, weights, input, mode, rng, true, |_, _| {})
}

/// Batch forward pass returning (batch, class_count) probabilities. Train
/// mode draws dropout masks from a fixed-seed generator.
pub fn forward<T: Real>(def: &NetworkDef, weights: &Weights<T>, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(run(def, weights, input, mode, &mut rng, false, |_, _| {})?.output)
}

/// Inference-mode forward pass that hands every layer output to `tap`.
pub fn forward_with_tap<T: Real>(
    def: &NetworkDef,
    weights: &Weights<T>,
    input: &Tensor<T>,
    tap: impl FnMut(usize, &Tensor<T>),
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(run(def, weights, input, Mode::Infer, &mut rng, false, tap)?.output)
}

pub fn backward<T: Real>(
    def: &NetworkDef,
    weights: &Weights<T>,
    trace: &Trace<T>,
    seed: GradSeed<T>,
) -> Result<Gradients<T>> {
    if trace.caches.len() != def.layers.len() {
        return Err(Error::invalid("trace was not recorded against this definition"));
    }
    let (mut g, mut last) = match seed {
        GradSeed::Probs(g) => (g, def.layers.len()),
        GradSeed::Logits(g) => {
            if def.layers.last() != Some(&LayerSpec::Softmax) {
                return Err(Error::invalid("logit gradients need a final softmax layer"));
            }
            (g, def.layers.len() - 1)
        }
    };
    if g.dims() != trace.output.dims() {
        return Err(Error::shape(format!(
            "seed gradient dims {:?}, output dims {:?}",
            g.dims(),
            trace.output.dims()
        )));
    }

    let mut grads: Vec<(String, Tensor<T>)> = Vec::new();
    while last > 0 {
        let i = last - 1;
        last = i;
        g = (|| -> Result<Tensor<T>> {
            Ok(match &trace.caches[i] {
                LayerCache::Conv { input } => {
                    let kn = def.param_name(i, ParamKind::Kernel);
                    let bn = def.param_name(i, ParamKind::Bias);
                    let params = ConvParams::new(weights.require(&kn)?, weights.require(&bn)?)?;
                    let r = ops::conv2d_backward(input, &params, &g)?;
                    grads.push((bn, r.bias));
                    grads.push((kn, r.kernel));
                    r.input
                }
                LayerCache::BatchNorm { cache } => {
                    let params = batchnorm_params(def, weights, i)?;
                    let r = ops::batchnorm_backward(&params, cache, &g)?;
                    grads.push((def.param_name(i, ParamKind::Beta), r.beta));
                    grads.push((def.param_name(i, ParamKind::Gamma), r.gamma));
                    r.input
                }
                LayerCache::Relu { input } => ops::relu_backward(input, &g)?,
                LayerCache::MaxPool { input_dims, argmax } => ops::max_pool2_backward(input_dims, argmax, &g)?,
                LayerCache::AvgPool { input_dims } => ops::avg_pool2_backward(input_dims, &g)?,
                LayerCache::Dropout { mask } => match mask {
                    None => g.clone(),
                    Some(m) => {
                        let data = g.data().iter().zip(m.data()).map(|(&a, &b)| a * b).collect();
                        Tensor::new(g.dims(), data)?
                    }
                },
                LayerCache::Flatten { input_dims } => g.clone().reshape(input_dims)?,
                LayerCache::Dense { input } => {
                    let wn = def.param_name(i, ParamKind::Weight);
                    let bn = def.param_name(i, ParamKind::Bias);
                    let r = ops::dense_backward(input, weights.require(&wn)?, weights.require(&bn)?, &g)?;
                    grads.push((bn, r.bias));
                    grads.push((wn, r.weight));
                    r.input
                }
                LayerCache::Softmax { output } => ops::softmax_backward(output, &g)?,
            })
        })()
        .map_err(|e| layer_err(def, i, e))?;
    }

    let mut params = Weights::new();
    for (name, t) in grads.into_iter().rev() {
        params.insert(name, t);
    }
    Ok(Gradients { params, input: g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::build_s_leafnet_scaled;

    #[test]
    fn zero_weights_give_uniform_output() {
        let def = build_s_leafnet_scaled(5, 32, 16).unwrap();
        let w = Weights::<f32>::zeros_for(&def).unwrap();
        let x = Tensor::from_fn(&[2, 1, 32, 32], |i| (i % 7) as f32);
        let y = forward(&def, &w, &x, Mode::Infer).unwrap();
        assert_eq!(y.dims(), &[2, 5]);
        assert!(y.data().iter().all(|&p| (p - 0.2).abs() < 1e-7));
    }

    #[test]
    fn missing_weight_names_the_layer() {
        let def = build_s_leafnet_scaled(3, 32, 16).unwrap();
        let mut w = Weights::<f32>::zeros_for(&def).unwrap();
        w.entries.shift_remove("s_leafnet.1.gamma");
        let err = forward(&def, &w, &Tensor::zeros(&[1, 1, 32, 32]), Mode::Infer).unwrap_err();
        assert!(err.to_string().contains("s_leafnet.1.gamma"), "{err}");
        assert!(w.check_against(&def).is_err());
    }

    #[test]
    fn wrong_input_dims_rejected() {
        let def = build_s_leafnet_scaled(3, 32, 16).unwrap();
        let w = Weights::<f32>::zeros_for(&def).unwrap();
        assert!(forward(&def, &w, &Tensor::zeros(&[1, 3, 32, 32]), Mode::Infer).is_err());
    }
}
