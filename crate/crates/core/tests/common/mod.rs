//! Finite-difference gradient checks shared by the integration tests.
#![allow(dead_code)]

use leafnet::netdef::{LayerSpec, NetworkDef};
use leafnet::network::{backward, forward_trace, GradSeed, Weights};
use leafnet::ops::{self, BatchNormParams, ConvParams, Mode};
use leafnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = f(&probe);
            probe.data_mut()[i] = orig - H;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn random(dims: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-scale..scale))
}

/// Random values kept at least `gap` away from zero.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Loss `Σ r ⊙ y` for a fixed random `r`, so `∂L/∂y = r`.
fn dot(a: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    a.data().iter().zip(r.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error per layer kind, checking the input gradient and
/// every parameter gradient of each op.
pub fn layer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // conv3x3
    {
        let x = random(&[2, 3, 5, 4], &mut rng, 1.0);
        let k = random(&[4, 3, 3, 3], &mut rng, 0.5);
        let b = random(&[4], &mut rng, 0.5);
        let r = random(&[2, 4, 5, 4], &mut rng, 1.0);
        let g = ops::conv2d_backward(&x, &ConvParams::new(&k, &b).unwrap(), &r).unwrap();
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
            dot(&ops::conv2d_forward(x, &ConvParams::new(k, b).unwrap()).unwrap(), &r)
        };
        let e = [
            rel_err(g.input.data(), &numeric_grad(&x, |x| loss(x, &k, &b))),
            rel_err(g.kernel.data(), &numeric_grad(&k, |k| loss(&x, k, &b))),
            rel_err(g.bias.data(), &numeric_grad(&b, |b| loss(&x, &k, b))),
        ];
        out.push(("conv3x3", e.into_iter().fold(0.0, f64::max)));
    }

    // batchnorm, both modes
    for (name, mode) in [("batchnorm/train", Mode::Train), ("batchnorm/infer", Mode::Infer)] {
        let x = random(&[3, 2, 3, 3], &mut rng, 2.0);
        let mut p = BatchNormParams::<f64>::identity(2);
        p.gamma = Tensor::new(&[2], vec![1.3, -0.7]).unwrap();
        p.beta = Tensor::new(&[2], vec![0.2, -0.4]).unwrap();
        p.moving_mean = Tensor::new(&[2], vec![0.1, -0.3]).unwrap();
        p.moving_var = Tensor::new(&[2], vec![0.8, 1.7]).unwrap();
        let r = random(&[3, 2, 3, 3], &mut rng, 1.0);
        let fwd = ops::batchnorm_forward(&x, &p, mode).unwrap();
        let g = ops::batchnorm_backward(&p, &fwd.cache, &r).unwrap();
        let loss = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let q = BatchNormParams { gamma: gamma.clone(), beta: beta.clone(), ..p.clone() };
            dot(&ops::batchnorm_forward(x, &q, mode).unwrap().output, &r)
        };
        let e = [
            rel_err(g.input.data(), &numeric_grad(&x, |x| loss(x, &p.gamma, &p.beta))),
            rel_err(g.gamma.data(), &numeric_grad(&p.gamma, |gm| loss(&x, gm, &p.beta))),
            rel_err(g.beta.data(), &numeric_grad(&p.beta, |bt| loss(&x, &p.gamma, bt))),
        ];
        out.push((name, e.into_iter().fold(0.0, f64::max)));
    }

    // relu, away from the kink
    {
        let x = away_from_zero(&[2, 3, 4, 4], &mut rng, 0.01);
        let r = random(x.dims(), &mut rng, 1.0);
        let g = ops::relu_backward(&x, &r).unwrap();
        out.push(("relu", rel_err(g.data(), &numeric_grad(&x, |x| dot(&ops::relu(x), &r)))));
    }

    // max pool on distinct values, including an odd extent
    {
        let x = Tensor::from_fn(&[2, 2, 5, 4], |i| ((i * 37) % 80) as f64 * 0.05 + rng.gen_range(0.0..0.01));
        let r = random(&[2, 2, 2, 2], &mut rng, 1.0);
        let fwd = ops::max_pool2(&x).unwrap();
        let g = ops::max_pool2_backward(x.dims(), &fwd.argmax, &r).unwrap();
        let num = numeric_grad(&x, |x| dot(&ops::max_pool2(x).unwrap().output, &r));
        out.push(("maxpool2", rel_err(g.data(), &num)));
    }

    // average pool
    {
        let x = random(&[2, 3, 4, 5], &mut rng, 1.0);
        let r = random(&[2, 3, 2, 2], &mut rng, 1.0);
        let g = ops::avg_pool2_backward(x.dims(), &r).unwrap();
        out.push(("avgpool2", rel_err(g.data(), &numeric_grad(&x, |x| dot(&ops::avg_pool2(x).unwrap(), &r)))));
    }

    // dense
    {
        let x = random(&[3, 7], &mut rng, 1.0);
        let w = random(&[4, 7], &mut rng, 0.5);
        let b = random(&[4], &mut rng, 0.5);
        let r = random(&[3, 4], &mut rng, 1.0);
        let g = ops::dense_backward(&x, &w, &b, &r).unwrap();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&ops::dense_forward(x, w, b).unwrap(), &r);
        let e = [
            rel_err(g.input.data(), &numeric_grad(&x, |x| loss(x, &w, &b))),
            rel_err(g.weight.data(), &numeric_grad(&w, |w| loss(&x, w, &b))),
            rel_err(g.bias.data(), &numeric_grad(&b, |b| loss(&x, &w, b))),
        ];
        out.push(("dense", e.into_iter().fold(0.0, f64::max)));
    }

    // softmax
    {
        let x = random(&[3, 5], &mut rng, 2.0);
        let r = random(&[3, 5], &mut rng, 1.0);
        let g = ops::softmax_backward(&ops::softmax(&x), &r).unwrap();
        out.push(("softmax", rel_err(g.data(), &numeric_grad(&x, |x| dot(&ops::softmax(x), &r)))));
    }

    // dropout with its mask held fixed
    {
        let x = random(&[2, 3, 4], &mut rng, 1.0);
        let r = random(x.dims(), &mut rng, 1.0);
        let run = |x: &Tensor<f64>| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            ops::dropout(x, 0.4, Mode::Train, &mut mask_rng).unwrap()
        };
        let mask = run(&x).1.expect("train mode keeps a mask");
        let analytic: Vec<f64> = r.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        out.push(("dropout", rel_err(&analytic, &numeric_grad(&x, |x| dot(&run(x).0, &r)))));
    }

    out
}

/// Two-convolution network on 8×8 inputs, exercising every layer kind.
pub fn micro_net() -> NetworkDef {
    NetworkDef::new(
        "micro",
        [2, 8, 8],
        vec![
            LayerSpec::Conv3x3 { out_channels: 3 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Conv3x3 { out_channels: 4 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::AvgPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 3 },
            LayerSpec::Softmax,
        ],
        3,
    )
    .unwrap()
}

/// Relative error of the full backward pass (every parameter and the input)
/// of the mean cross-entropy of [`micro_net`] in train mode.
pub fn end_to_end_gradient_error(seed: u64) -> f64 {
    let def = micro_net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Weights<f64> = leafnet::trainer::xavier_init(&def, seed).unwrap().cast();
    for (name, t) in w.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with(".bias") {
            *t = Tensor::from_fn(t.dims(), |_| rng.gen_range(-0.5..0.5) + if name.ends_with("gamma") { 1.0 } else { 0.0 });
        }
    }
    let x = random(&[4, 2, 8, 8], &mut rng, 1.0);
    let labels = [0usize, 2, 1, 2];
    let n = labels.len() as f64;

    let loss = |w: &Weights<f64>, x: &Tensor<f64>| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
        let t = forward_trace(&def, w, x, Mode::Train, &mut drop_rng).unwrap();
        let p = t.output.data();
        labels.iter().enumerate().map(|(i, &y)| -p[i * 3 + y].ln()).sum::<f64>() / n
    };

    let mut drop_rng = ChaCha8Rng::seed_from_u64(7);
    let trace = forward_trace(&def, &w, &x, Mode::Train, &mut drop_rng).unwrap();
    let p = trace.output.data();
    let seed_grad = Tensor::from_fn(trace.output.dims(), |i| {
        let (row, col) = (i / 3, i % 3);
        if col == labels[row] {
            -1.0 / (n * p[i])
        } else {
            0.0
        }
    });
    let grads = backward(&def, &w, &trace, GradSeed::Probs(seed_grad)).unwrap();

    let mut analytic = grads.input.data().to_vec();
    let mut numeric = numeric_grad(&x, |x| loss(&w, x));
    let names: Vec<String> = grads.params.names().map(str::to_string).collect();
    for name in names {
        analytic.extend_from_slice(grads.params.get(&name).unwrap().data());
        let base = w.get(&name).unwrap().clone();
        let mut probe = w.clone();
        numeric.extend(numeric_grad(&base, |t| {
            *probe.get_mut(&name).unwrap() = t.clone();
            loss(&probe, &x)
        }));
    }
    rel_err(&analytic, &numeric)
}
