//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

pub mod scenarios;

use mapcast::tensor_nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values at least `gap` away from zero.
pub fn random_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far apart relative to EPS, in random order, so no
/// pooling window ever has a tie even after perturbation.
pub fn random_untied(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    values.shuffle(rng);
    Tensor::new(shape, values).unwrap()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// ||a - n|| / max(||a|| + ||n||, tiny) over one tensor.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if norm < 1e-12 {
        diff
    } else {
        diff / norm
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + EPS;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - EPS;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * EPS)
        })
        .collect()
}

/// Central differences that skip coordinates whose perturbation crosses a
/// kink (a ReLU sign change or a pooling argmax switch). Along one coordinate
/// the network is piecewise linear and the MSE loss piecewise quadratic, so
/// the third difference over x-e..x+2e vanishes unless a kink lies inside
/// that window; such entries come back as `None`.
pub fn numeric_grad_smooth(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<Option<f64>> {
    let f0 = f(x);
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            let mut at = |delta: f64| {
                probe.data_mut()[i] = orig + delta;
                let v = f(&probe);
                probe.data_mut()[i] = orig;
                v
            };
            let plus = at(EPS);
            let minus = at(-EPS);
            let plus2 = at(2.0 * EPS);
            let third = plus2 - 3.0 * plus + 3.0 * f0 - minus;
            if third.abs() > 1e-12 * (1.0 + f0.abs()) {
                None
            } else {
                Some((plus - minus) / (2.0 * EPS))
            }
        })
        .collect()
}

/// Worst relative error over the kernel checks for one seed, as
/// (name, error) pairs.
pub fn kernel_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    // conv2d: loss = <probe, conv(x, k, b)>
    let ci = r.gen_range(1..4);
    let co = r.gen_range(1..4);
    let h = r.gen_range(2..7);
    let w = r.gen_range(2..7);
    let ksize = if r.gen::<bool>() { 3 } else { 1 };
    let x = random(&[2, ci, h, w], &mut r);
    let k = random(&[co, ci, ksize, ksize], &mut r);
    let b = random(&[co], &mut r);
    let probe = random(&[2, co, h, w], &mut r);
    let g = conv2d_backward(&x, &k, &probe).unwrap();
    let nx = numeric_grad(&x, |x| dot(&probe, &conv2d_forward(x, &k, &b).unwrap()));
    let nk = numeric_grad(&k, |k| dot(&probe, &conv2d_forward(&x, k, &b).unwrap()));
    let nb = numeric_grad(&b, |b| dot(&probe, &conv2d_forward(&x, &k, b).unwrap()));
    out.push(("conv2d.input", rel_error(g.input.data(), &nx)));
    out.push(("conv2d.weight", rel_error(g.weight.data(), &nk)));
    out.push(("conv2d.bias", rel_error(g.bias.data(), &nb)));

    // upconv2d
    let x = random(&[2, ci, h, w], &mut r);
    let k = random(&[ci, co, 2, 2], &mut r);
    let b = random(&[co], &mut r);
    let probe = random(&[2, co, 2 * h, 2 * w], &mut r);
    let g = upconv2d_backward(&x, &k, &probe).unwrap();
    let nx = numeric_grad(&x, |x| dot(&probe, &upconv2d_forward(x, &k, &b).unwrap()));
    let nk = numeric_grad(&k, |k| dot(&probe, &upconv2d_forward(&x, k, &b).unwrap()));
    let nb = numeric_grad(&b, |b| dot(&probe, &upconv2d_forward(&x, &k, b).unwrap()));
    out.push(("upconv2d.input", rel_error(g.input.data(), &nx)));
    out.push(("upconv2d.weight", rel_error(g.weight.data(), &nk)));
    out.push(("upconv2d.bias", rel_error(g.bias.data(), &nb)));

    // maxpool on untied inputs
    let x = random_untied(&[2, ci, 2 * h, 2 * w], &mut r);
    let probe = random(&[2, ci, h, w], &mut r);
    let (_, record) = maxpool2d_forward(&x).unwrap();
    let gx = maxpool2d_backward(&record, &probe).unwrap();
    let nx = numeric_grad(&x, |x| dot(&probe, &maxpool2d_forward(x).unwrap().0));
    out.push(("maxpool2d", rel_error(gx.data(), &nx)));

    // relu away from the kink
    let x = random_away_from_zero(&[2, ci, h, w], 0.01, &mut r);
    let probe = random(&[2, ci, h, w], &mut r);
    let gx = relu_backward(&x, &probe).unwrap();
    let nx = numeric_grad(&x, |x| dot(&probe, &relu_forward(x)));
    out.push(("relu", rel_error(gx.data(), &nx)));

    // mse against a fixed target
    let p = random(&[2, co, h, w], &mut r);
    let t = random(&[2, co, h, w], &mut r);
    let (_, gp) = mse_loss(&p, &t).unwrap();
    let np = numeric_grad(&p, |p| mse_loss(p, &t).unwrap().0);
    out.push(("mse_loss", rel_error(gp.data(), &np)));

    out
}

pub fn toy_config() -> UNetConfig {
    UNetConfig {
        depth: 2,
        in_channels: 3,
        out_channels: 2,
        base_channels: 2,
        normalize_input: false,
        normalize_output: false,
    }
}

pub struct UNetCheck {
    /// (tensor, relative error), worst first.
    pub errors: Vec<(String, f64)>,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
}

impl UNetCheck {
    pub fn worst(&self) -> (&str, f64) {
        (&self.errors[0].0, self.errors[0].1)
    }
}

/// End-to-end check on the depth-2 toy network with an 8x8 input: relative
/// error of the input gradient and of every parameter tensor.
pub fn unet_check(seed: u64) -> UNetCheck {
    let mut r = rng(seed);
    // odd seeds exercise the input and output scaling
    let cfg = UNetConfig {
        normalize_input: seed % 2 == 1,
        normalize_output: seed % 2 == 1,
        ..toy_config()
    };
    let params = UNetParams::<f64>::init(cfg, seed).unwrap();
    // random biases so no unit sits at exactly zero, and a random head so
    // gradients reach the body
    let mut params = params;
    for (name, t) in params.named_tensors_mut() {
        if name.ends_with("bias") {
            *t = Tensor::from_fn(t.shape(), |_| r.gen_range(-0.1..0.1));
        } else if name == "head.weight" {
            *t = Tensor::from_fn(t.shape(), |_| r.gen_range(-1.0..1.0));
        }
    }
    let x = random(&[1, 3, 8, 8], &mut r);
    let target = random(&[1, 2, 8, 8], &mut r);
    let loss = |p: &UNetParams<f64>, x: &Tensor<f64>| mse_loss(&unet_forward(p, x).unwrap(), &target).unwrap().0;

    let out = unet_forward(&params, &x).unwrap();
    let (_, grad_out) = mse_loss(&out, &target).unwrap();
    let (grads, gx) = unet_backward(&params, &x, &grad_out).unwrap();

    let mut check = UNetCheck {
        errors: Vec::new(),
        checked: 0,
        skipped: 0,
    };
    let mut record = |name: String, analytic: &[f64], numeric: Vec<Option<f64>>| {
        let (a, n): (Vec<f64>, Vec<f64>) = analytic
            .iter()
            .zip(numeric)
            .filter_map(|(&a, n)| n.map(|n| (a, n)))
            .unzip();
        check.skipped += analytic.len() - a.len();
        check.checked += a.len();
        check.errors.push((name, rel_error(&a, &n)));
    };
    record("input".into(), gx.data(), numeric_grad_smooth(&x, |x| loss(&params, x)));
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (idx, name) in names.iter().enumerate() {
        let original = params.tensors()[idx].clone();
        let mut scratch = params.clone();
        let numeric = numeric_grad_smooth(&original, |t| {
            *scratch.tensors_mut()[idx] = t.clone();
            loss(&scratch, &x)
        });
        record(name.clone(), grads.tensors()[idx].data(), numeric);
    }
    check.errors.sort_by(|a, b| b.1.total_cmp(&a.1));
    check
}
