//! Per-channel batch normalization over NCHW tensors.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    pub epsilon: f64,
    /// Weight kept by the moving statistics on each update.
    pub momentum: f64,
}

impl<T: Real> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::full(&[channels], T::one()),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> Result<usize> {
        let c = self.gamma.len();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("moving_mean", &self.moving_mean),
            ("moving_var", &self.moving_var),
        ] {
            if t.dims() != [c] {
                return Err(Error::shape(format!(
                    "batchnorm {name} dims {:?}, expected [{c}]",
                    t.dims()
                )));
            }
        }
        Ok(c)
    }
}

/// Saved state from a forward pass, consumed by [`batchnorm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T = f32> {
    pub mode: Mode,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T = f32> {
    pub output: Tensor<T>,
    pub cache: BatchNormCache<T>,
    /// Updated (moving_mean, moving_var); only produced in train mode.
    pub moving: Option<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn planes<T: Real>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    let [n, c, h, w] = input.nchw()?;
    if c != channels {
        return Err(Error::shape(format!(
            "batchnorm has {channels} channels, input has {c}"
        )));
    }
    Ok((n, h * w))
}

pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<BatchNormOutput<T>> {
    let c = params.channels()?;
    let (n, hw) = planes(input, c)?;
    let eps = T::from_f64_lossy(params.epsilon);
    let x = input.data();
    let count = T::from_count(n * hw);

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Infer => (
            params.moving_mean.data().to_vec(),
            params.moving_var.data().to_vec(),
        ),
        Mode::Train => (0..c)
            .map(|ch| {
                let values = || (0..n).flat_map(move |b| x[(b * c + ch) * hw..][..hw].iter().copied());
                let mean = values().sum::<T>() / count;
                let var = values().map(|v| (v - mean) * (v - mean)).sum::<T>() / count;
                (mean, var)
            })
            .unzip(),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let gamma = params.gamma.data();
    let beta = params.beta.data();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                out[i] = xh * gamma[ch] + beta[ch];
            }
        }
    }

    let moving = (mode == Mode::Train).then(|| {
        let m = T::from_f64_lossy(params.momentum);
        let blend = |old: &Tensor<T>, batch: &[T]| {
            Tensor::from_fn(&[c], |i| m * old.data()[i] + (T::one() - m) * batch[i])
        };
        (blend(&params.moving_mean, &mean), blend(&params.moving_var, &var))
    });

    Ok(BatchNormOutput {
        output: Tensor::new(input.dims(), out)?,
        cache: BatchNormCache {
            mode,
            x_hat: Tensor::new(input.dims(), x_hat)?,
            inv_std,
        },
        moving,
    })
}

pub fn batchnorm_backward<T: Real>(
    params: &BatchNormParams<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let c = params.channels()?;
    let (n, hw) = planes(grad_out, c)?;
    if grad_out.dims() != cache.x_hat.dims() {
        return Err(Error::shape("batchnorm backward: gradient dims differ from forward"));
    }
    let g = grad_out.data();
    let xh = cache.x_hat.data();
    let gamma = params.gamma.data();
    let count = T::from_count(n * hw);

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] = dgamma[ch] + g[i] * xh[i];
                dbeta[ch] = dbeta[ch] + g[i];
            }
        }
    }

    let mut dx = vec![T::zero(); g.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            for i in base..base + hw {
                dx[i] = match cache.mode {
                    Mode::Infer => g[i] * scale,
                    Mode::Train => {
                        scale * (g[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                    }
                };
            }
        }
    }

    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.dims(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_stats_are_near_identity() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.3).sin());
        let mut p = BatchNormParams::<f64>::identity(3);
        p.epsilon = 1e-12;
        let y = batchnorm_forward(&x, &p, Mode::Infer).unwrap();
        assert!(y.output.max_abs_diff(&x) < 1e-9);
        assert!(y.moving.is_none());
    }

    #[test]
    fn train_mode_normalizes_to_beta_and_gamma() {
        let x = Tensor::from_fn(&[4, 2, 5, 5], |i| ((i * 7919) % 101) as f32 * 0.1 + 3.0);
        let mut p = BatchNormParams::<f32>::identity(2);
        p.gamma = Tensor::new(&[2], vec![2.0, 0.5]).unwrap();
        p.beta = Tensor::new(&[2], vec![-1.0, 4.0]).unwrap();
        p.epsilon = 1e-6;
        let y = batchnorm_forward(&x, &p, Mode::Train).unwrap().output;
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 2 + ch) * 25..][..25].to_vec())
                .map(f64::from)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - f64::from(p.beta.data()[ch])).abs() < 1e-3);
            assert!((std - f64::from(p.gamma.data()[ch])).abs() < 1e-3);
        }
    }

    #[test]
    fn moving_stats_blend_with_momentum() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![1.0f64, 3.0]).unwrap();
        let p = BatchNormParams::<f64>::identity(1);
        let out = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        let (mm, mv) = out.moving.unwrap();
        assert!((mm.data()[0] - 0.01 * 2.0).abs() < 1e-12);
        assert!((mv.data()[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 4, 2, 2]);
        assert!(batchnorm_forward(&x, &BatchNormParams::identity(3), Mode::Infer).is_err());
    }
}
