use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.dims() != grad_out.dims() {
        return Err(Error::shape("relu backward: gradient dims differ from input"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.dims(), data)
}

/// Row-wise softmax over the last axis, computed with max subtraction.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = *logits.dims().last().expect("non-empty dims");
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.dims() != grad_out.dims() {
        return Err(Error::shape("softmax backward: gradient dims differ"));
    }
    let k = *probs.dims().last().expect("non-empty dims");
    let mut gx = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(k).zip(grad_out.data().chunks(k)) {
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        gx.extend(p.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(probs.dims(), gx)
}

/// Inverted dropout. Returns the output and the per-element scale that was
/// applied (0 or `1/(1-rate)`), which doubles as the backward mask.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(input.dims(), |_| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    });
    let out = input
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&x, &m)| x * m)
        .collect();
    Ok((Tensor::new(input.dims(), out)?, Some(mask)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn relu_clamps() {
        let x = Tensor::new(&[2], vec![-3.0f32, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&Tensor::full(&[1, 4], 7.0f32));
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let p = softmax(&Tensor::new(&[2], vec![1000.0f32, 0.0]).unwrap());
        assert!(p.data().iter().all(|v| v.is_finite()));
        assert!((p.data()[0] - 1.0).abs() < 1e-6 && p.data()[1] < 1e-6);
    }

    #[test]
    fn dropout_inference_and_zero_rate_are_identity() {
        let x = Tensor::from_fn(&[3, 5], |i| i as f32 - 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dropout(&x, 0.7, Mode::Infer, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Infer, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let x = Tensor::full(&[200_000], 1.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (y, mask) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!(mask.unwrap().data().iter().all(|&m| m == 0.0 || m == 2.0));
    }
}
