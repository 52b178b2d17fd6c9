//! Loss, learning-rate schedule, initialization and the Adam update.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netdef::{NetworkDef, ParamKind};
use crate::network::Weights;
use crate::prob::ProbVector;
use crate::tensor::{Real, Tensor};

/// Floor applied to the true-class probability inside the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// `-ln(probs[true_class])`, finite even when that probability is 0.
pub fn cross_entropy(probs: &ProbVector, true_class: usize) -> Result<f64> {
    if true_class >= probs.len() {
        return Err(Error::invalid(format!("class {true_class} out of range for {} classes", probs.len())));
    }
    Ok(-f64::from(probs.get(true_class)).max(LOG_FLOOR).ln())
}

/// Mean cross-entropy over a (batch, classes) probability tensor and the
/// matching gradient with respect to the logits.
pub fn batch_cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [n, k] = match probs.dims() {
        &[n, k] => [n, k],
        d => return Err(Error::shape(format!("expected (batch, classes), got {d:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for batch {n}", labels.len())));
    }
    let scale = T::from_f64_lossy(1.0 / n as f64);
    let mut grad = probs.data().to_vec();
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let p = probs.data()[b * k + y].to_f64().unwrap_or(0.0);
        loss -= p.max(LOG_FLOOR).ln();
        grad[b * k + y] = grad[b * k + y] - T::one();
    }
    for g in &mut grad {
        *g = *g * scale;
    }
    Ok((loss / n as f64, Tensor::new(probs.dims(), grad)?))
}

/// `(lambda / 2) · Σ w²` over kernels and dense weights.
pub fn l2_penalty<T: Real>(weights: &Weights<T>, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let sum: f64 = weights
        .iter()
        .filter(|(n, _)| ParamKind::from_name(n).is_some_and(ParamKind::is_regularized))
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.to_f64().unwrap_or(0.0).powi(2))
        .sum();
    0.5 * lambda * sum
}

/// Triangular cyclical learning rate whose amplitude halves every cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clr {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-cycle length in optimizer steps.
    pub step_size: u64,
}

impl Default for Clr {
    fn default() -> Self {
        Clr { base_lr: 0.001, max_lr: 0.006, step_size: 40 }
    }
}

impl Clr {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr) {
            return Err(Error::invalid(format!("need 0 < base_lr <= max_lr, got {} and {}", self.base_lr, self.max_lr)));
        }
        if self.step_size == 0 {
            return Err(Error::invalid("clr step size must be >= 1"));
        }
        Ok(())
    }

    pub fn rate(&self, iteration: u64) -> f64 {
        let step = self.step_size as f64;
        let it = iteration as f64;
        let cycle = (1.0 + it / (2.0 * step)).floor();
        let x = (it / step - 2.0 * cycle + 1.0).abs();
        self.base_lr + (self.max_lr - self.base_lr) * (1.0 - x).max(0.0) * 2f64.powf(1.0 - cycle)
    }
}

/// Glorot-uniform kernels and dense weights, zero biases, unit gamma, zero
/// beta, moving statistics (0, 1). Conv fans include the 3×3 window.
pub fn xavier_init(def: &NetworkDef, seed: u64) -> Result<Weights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::new();
    for spec in def.param_specs()? {
        let t = match spec.kind {
            ParamKind::Kernel | ParamKind::Weight => {
                let receptive: usize = spec.dims[2..].iter().product();
                let fan_in = spec.dims[1] * receptive;
                let fan_out = spec.dims[0] * receptive;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let dist = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(&spec.dims, |_| dist.sample(&mut rng))
            }
            ParamKind::Gamma | ParamKind::MovingVar => Tensor::full(&spec.dims, 1.0),
            ParamKind::Bias | ParamKind::Beta | ParamKind::MovingMean => Tensor::zeros(&spec.dims),
        };
        w.insert(spec.name, t);
    }
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments per trainable parameter.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Weights<T>,
    pub v: Weights<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Weights<T>) -> Self {
        let mut m = Weights::new();
        for (name, t) in params.iter() {
            if ParamKind::from_name(name).is_some_and(ParamKind::is_trainable) {
                m.insert(name, Tensor::zeros(t.dims()));
            }
        }
        AdamState { step: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Kernels and
/// dense weights get `l2_lambda · w` added to their gradient first.
pub fn adam_step<T: Real>(
    params: &mut Weights<T>,
    grads: &Weights<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
    l2_lambda: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, w) in params.iter_mut() {
        let Some(kind) = ParamKind::from_name(name).filter(|k| k.is_trainable()) else {
            continue;
        };
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Weights { layer: name.to_string(), reason: "no gradient".into() })?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Weights { layer: name.to_string(), reason: "no optimizer state".into() })?;
        if g.dims() != w.dims() || m.dims() != w.dims() {
            return Err(Error::shape(format!("{name}: gradient {:?} vs parameter {:?}", g.dims(), w.dims())));
        }
        let decay = if kind.is_regularized() { l2_lambda } else { 0.0 };
        let v = state.v.get_mut(name).expect("m and v share keys");
        for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let wf = wi.to_f64().unwrap_or(0.0);
            let gf = gi.to_f64().unwrap_or(0.0) + decay * wf;
            let mf = b1 * mi.to_f64().unwrap_or(0.0) + (1.0 - b1) * gf;
            let vf = b2 * vi.to_f64().unwrap_or(0.0) + (1.0 - b2) * gf * gf;
            *mi = T::from_f64_lossy(mf);
            *vi = T::from_f64_lossy(vf);
            *wi = T::from_f64_lossy(wf - lr * (mf / c1) / ((vf / c2).sqrt() + cfg.epsilon));
        }
    }
    Ok(())
}
