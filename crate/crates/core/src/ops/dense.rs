use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct DenseGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Splits `input` into (batch, features); rank-1 input is a batch of one.
fn rows<T: Real>(input: &Tensor<T>) -> (usize, usize) {
    match input.dims() {
        [f] => (1, *f),
        d => (d[0], input.len() / d[0]),
    }
}

fn check<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, f) = rows(input);
    match *weight.dims() {
        [units, inner] if inner == f && bias.dims() == [units] => Ok((n, f, units)),
        _ => Err(Error::shape(format!(
            "dense weight {:?} / bias {:?} incompatible with {f} input features",
            weight.dims(),
            bias.dims()
        ))),
    }
}

/// `y = x · Wᵀ + b` with `weight` shaped (units, in_features).
pub fn dense_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, units) = check(input, weight, bias)?;
    let mut out = Vec::with_capacity(n * units);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm_nt(n, units, f, input.data(), weight.data(), &mut out);
    Tensor::new(&[n, units], out)
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, f, units) = check(input, weight, bias)?;
    if grad_out.len() != n * units {
        return Err(Error::shape("dense backward: gradient length mismatch"));
    }
    let g = grad_out.data();
    let mut gw = vec![T::zero(); units * f];
    gemm_tn(units, f, n, g, input.data(), &mut gw);
    let mut gx = vec![T::zero(); n * f];
    gemm_nn(n, f, units, g, weight.data(), &mut gx);
    let gb: Vec<T> = (0..units)
        .map(|u| (0..n).map(|b| g[b * units + u]).sum())
        .collect();
    Ok(DenseGrads {
        input: Tensor::new(input.dims(), gx)?,
        weight: Tensor::new(weight.dims(), gw)?,
        bias: Tensor::new(&[units], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let x = Tensor::new(&[1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(&[2], vec![0.25, -1.0]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.dims(), &[1, 2]);
        assert_eq!(y.data(), &[-1.75, 2.0]);
    }

    #[test]
    fn inner_dim_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 4]);
        let w = Tensor::zeros(&[2, 3]);
        assert!(dense_forward(&x, &w, &Tensor::zeros(&[2])).is_err());
    }
}
