//! Central finite-difference oracle for every layer kind, in f64.
//!
//! Each check reduces a layer's output to a scalar with a fixed random
//! projection `L = Σ rᵢ yᵢ`, feeds `r` into the analytic backward pass, and
//! compares every input and parameter gradient with
//! `(L(x + h) - L(x - h)) / 2h`, `h = 1e-5`. Relative error is
//! `|a - n| / max(|a|, |n|, 1e-7)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surrogate_core::nn::layers::{self, LrnParams};
use surrogate_core::nn::network::{LayerSpec, Mode, Network, NetworkConfig};
use surrogate_core::nn::Tensor;

pub const STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values away from zero so ReLU kinks sit outside the difference stencil.
fn random_off_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, r).map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x })
}

fn project(y: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// Max relative error between `analytic` and numeric derivatives of
/// `loss` with respect to every element of `x`.
fn compare(x: &Tensor<f64>, analytic: &Tensor<f64>, loss: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - STEP;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

pub fn conv() -> f64 {
    let mut r = rng(1);
    let x = random(&[2, 3, 6, 6], &mut r);
    let w = random(&[4, 3, 3, 3], &mut r);
    let b = random(&[4], &mut r);
    let (stride, pad) = (2, 1);
    let y = layers::conv2d_forward(&x, &w, &b, stride, pad).unwrap();
    let proj = random(y.shape(), &mut r);
    let g = layers::conv2d_backward(&x, &w, &b, stride, pad, &proj).unwrap();
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        project(&layers::conv2d_forward(x, w, b, stride, pad).unwrap(), &proj)
    };
    compare(&x, &g.input, |x| f(x, &w, &b))
        .max(compare(&w, &g.weight, |w| f(&x, w, &b)))
        .max(compare(&b, &g.bias, |b| f(&x, &w, b)))
}

pub fn dense() -> f64 {
    let mut r = rng(2);
    let x = random(&[4, 12], &mut r);
    let w = random(&[5, 12], &mut r);
    let b = random(&[5], &mut r);
    let proj = random(&[4, 5], &mut r);
    let g = layers::dense_backward(&x, &w, &b, &proj).unwrap();
    let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
        project(&layers::dense_forward(x, w, b).unwrap(), &proj)
    };
    compare(&x, &g.input, |x| f(x, &w, &b))
        .max(compare(&w, &g.weight, |w| f(&x, w, &b)))
        .max(compare(&b, &g.bias, |b| f(&x, &w, b)))
}

pub fn relu() -> f64 {
    let mut r = rng(3);
    let x = random_off_zero(&[2, 3, 5, 5], &mut r);
    let proj = random(x.shape(), &mut r);
    let g = layers::relu_backward(&x, &proj).unwrap();
    compare(&x, &g, |x| project(&layers::relu_forward(x), &proj))
}

pub fn maxpool() -> f64 {
    let mut r = rng(4);
    // Distinct values 0.01 apart: every window has a unique maximum.
    let n = 2 * 2 * 7 * 7;
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        values.swap(i, r.gen_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 2, 7, 7], values).unwrap();
    let (y, argmax) = layers::maxpool_forward(&x, 3, 2).unwrap();
    let proj = random(y.shape(), &mut r);
    let g = layers::maxpool_backward(x.shape(), &argmax, &proj).unwrap();
    compare(&x, &g, |x| project(&layers::maxpool_forward(x, 3, 2).unwrap().0, &proj))
}

pub fn lrn() -> f64 {
    let mut r = rng(5);
    let x = random(&[2, 6, 3, 3], &mut r);
    let mut worst: f64 = 0.0;
    // Canonical constants, and a strong setting where the cross-channel
    // term dominates.
    for p in [
        LrnParams::default(),
        LrnParams { depth_radius: 2, alpha: 0.5, beta: 0.75, bias: 1.0 },
    ] {
        let (y, scale) = layers::lrn_forward(&x, p).unwrap();
        let proj = random(y.shape(), &mut r);
        let g = layers::lrn_backward(&x, &scale, p, &proj).unwrap();
        worst = worst.max(compare(&x, &g, |x| project(&layers::lrn_forward(x, p).unwrap().0, &proj)));
    }
    worst
}

/// Dropout in eval mode (identity) and in train mode with a frozen mask.
pub fn dropout() -> f64 {
    let mut r = rng(6);
    let x = random(&[3, 40], &mut r);
    let proj = random(x.shape(), &mut r);
    let ones = vec![1.0; x.len()];
    let eval = compare(&x, &layers::apply_mask(&proj, &ones).unwrap(), |x| project(x, &proj));
    let mask: Vec<f64> = layers::dropout_mask(x.len(), 0.5, &mut r);
    let g = layers::apply_mask(&proj, &mask).unwrap();
    let train = compare(&x, &g, |x| project(&layers::apply_mask(x, &mask).unwrap(), &proj));
    eval.max(train)
}

pub fn softmax_cross_entropy() -> f64 {
    let mut r = rng(7);
    let logits = random(&[5, 7], &mut r).map(|v| 3.0 * v);
    let labels = [0, 6, 3, 3, 1];
    let out = layers::softmax_cross_entropy(&logits, &labels).unwrap();
    compare(&logits, &out.grad, |z| layers::softmax_cross_entropy(z, &labels).unwrap().loss)
}

/// End to end through a small network (conv, relu, lrn, pool, dense,
/// dropout with a fixed seed, softmax cross-entropy).
pub fn network() -> f64 {
    let config = NetworkConfig {
        input: (2, 6, 6),
        layers: vec![
            LayerSpec::conv(3, 3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::Lrn { depth_radius: 1, alpha: 0.3, beta: 0.75, bias: 1.0 },
            LayerSpec::maxpool(2, 2),
            LayerSpec::Flatten,
            LayerSpec::dense(6),
            LayerSpec::Relu,
            LayerSpec::Dropout { p: 0.3 },
            LayerSpec::dense(3),
            LayerSpec::Softmax,
        ],
        num_classes: 3,
        labels: vec![],
    };
    let net = Network::<f64>::init(config, 8).unwrap();
    let mut r = rng(9);
    let x = random(&[2, 2, 6, 6], &mut r);
    let labels = [2, 0];
    let loss_of = |net: &Network<f64>, x: &Tensor<f64>| {
        let mut drop_rng = rng(10);
        let (logits, _) = net.forward(x, Mode::Train(&mut drop_rng), false).unwrap();
        layers::softmax_cross_entropy(&logits, &labels).unwrap().loss
    };
    let mut drop_rng = rng(10);
    let (logits, trace) = net.forward(&x, Mode::Train(&mut drop_rng), true).unwrap();
    let out = layers::softmax_cross_entropy(&logits, &labels).unwrap();
    let (grads, grad_x) = net.backward(trace, &out.grad).unwrap();

    let mut worst = compare(&x, &grad_x, |x| loss_of(&net, x));
    for (li, lp) in grads.layers.iter().enumerate() {
        let Some(lp) = lp else { continue };
        let weight = &net.params.layers[li].as_ref().unwrap().weight;
        worst = worst.max(compare(weight, &lp.weight, |w| {
            let mut probe = net.clone();
            probe.params.layers[li].as_mut().unwrap().weight = w.clone();
            loss_of(&probe, &x)
        }));
        let bias = &net.params.layers[li].as_ref().unwrap().bias;
        worst = worst.max(compare(bias, &lp.bias, |b| {
            let mut probe = net.clone();
            probe.params.layers[li].as_mut().unwrap().bias = b.clone();
            loss_of(&probe, &x)
        }));
    }
    worst
}

/// `(kind, max relative error)` for every layer kind.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("conv", conv()),
        ("dense", dense()),
        ("relu", relu()),
        ("maxpool", maxpool()),
        ("lrn", lrn()),
        ("dropout", dropout()),
        ("softmax_cross_entropy", softmax_cross_entropy()),
        ("network", network()),
    ]
}
