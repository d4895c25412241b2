#![allow(dead_code)]

use lesionforge::gradcheck::{self, random_tensor, GradReport};
use lesionforge::layers::{Layer, LayerSpec, Mode, Padding};
use lesionforge::rng;
use rand_distr::{Distribution, Normal};

pub const GRAD_TOL: f64 = 1e-4;

pub struct Case {
    pub family: &'static str,
    pub spec: LayerSpec,
    pub input: Vec<usize>,
}

fn conv(name: &str, cin: usize, cout: usize, k: usize, s: usize, p: Padding) -> LayerSpec {
    LayerSpec::Conv2d {
        name: name.into(),
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride: s,
        padding: p,
    }
}

fn sep(name: &str, cin: usize, cout: usize, k: usize, s: usize, p: Padding) -> LayerSpec {
    LayerSpec::SeparableConv2d {
        name: name.into(),
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride: s,
        padding: p,
    }
}

fn case(family: &'static str, spec: LayerSpec, input: &[usize]) -> Case {
    Case {
        family,
        spec,
        input: input.to_vec(),
    }
}

pub fn cases() -> Vec<Case> {
    use Padding::*;
    let bn = |c| LayerSpec::BatchNorm {
        name: "bn".into(),
        channels: c,
        eps: 1e-5,
        momentum: 0.99,
    };
    let pool = |max: bool, size, stride| {
        if max {
            LayerSpec::MaxPool { name: "pool".into(), size, stride }
        } else {
            LayerSpec::AvgPool { name: "pool".into(), size, stride }
        }
    };
    let dense = |i, o| LayerSpec::Dense {
        name: "fc".into(),
        in_features: i,
        out_features: o,
    };
    let res = |c, k| LayerSpec::Residual {
        name: "res".into(),
        channels: c,
        kernel: k,
        slope: 0.01,
    };
    let dblock = |c, g, l| LayerSpec::DenseBlock {
        name: "db".into(),
        in_channels: c,
        growth: g,
        layers: l,
        kernel: 3,
        slope: 0.01,
    };
    vec![
        case("conv", conv("c", 2, 3, 3, 1, Same), &[2, 2, 5, 5]),
        case("conv", conv("c", 3, 2, 3, 2, Valid), &[1, 3, 7, 7]),
        case("conv", conv("c", 1, 2, 2, 1, Same), &[3, 1, 4, 4]),
        case("dense", dense(3, 4), &[2, 3]),
        case("dense", dense(5, 2), &[3, 5]),
        case("dense", dense(7, 3), &[1, 7]),
        case("batch_norm", bn(3), &[2, 3, 3, 3]),
        case("batch_norm", bn(2), &[4, 2, 2, 2]),
        case("batch_norm", bn(4), &[6, 4]),
        case("max_pool", pool(true, 2, 2), &[1, 2, 4, 4]),
        case("max_pool", pool(true, 3, 3), &[2, 1, 6, 6]),
        case("max_pool", pool(true, 2, 1), &[1, 3, 5, 5]),
        case("avg_pool", pool(false, 2, 2), &[1, 2, 4, 4]),
        case("avg_pool", pool(false, 3, 3), &[2, 1, 6, 6]),
        case("avg_pool", pool(false, 2, 1), &[1, 3, 5, 5]),
        case("dropout", LayerSpec::Dropout { name: "d".into(), rate: 0.5 }, &[2, 3, 3, 3]),
        case("dropout", LayerSpec::Dropout { name: "d".into(), rate: 0.3 }, &[4, 6]),
        case("dropout", LayerSpec::Dropout { name: "d".into(), rate: 0.2 }, &[1, 2, 5, 5]),
        case("leaky_relu", LayerSpec::LeakyRelu { name: "a".into(), slope: 0.01 }, &[2, 3, 4, 4]),
        case("leaky_relu", LayerSpec::LeakyRelu { name: "a".into(), slope: 0.2 }, &[3, 5]),
        case("leaky_relu", LayerSpec::LeakyRelu { name: "a".into(), slope: 0.0 }, &[1, 1, 6, 6]),
        case("residual", res(2, 3), &[2, 2, 4, 4]),
        case("residual", res(3, 3), &[1, 3, 5, 5]),
        case("residual", res(1, 1), &[2, 1, 3, 3]),
        case("dense_concat", dblock(2, 2, 2), &[2, 2, 4, 4]),
        case("dense_concat", dblock(3, 1, 3), &[1, 3, 3, 3]),
        case("dense_concat", dblock(1, 3, 1), &[2, 1, 4, 4]),
        case("separable", sep("s", 2, 3, 3, 1, Same), &[2, 2, 5, 5]),
        case("separable", sep("s", 3, 2, 3, 2, Valid), &[1, 3, 7, 7]),
        case("separable", sep("s", 2, 4, 3, 1, Valid), &[1, 2, 4, 5]),
    ]
}

/// Builds the layer and jitters every parameter so no check runs at a special point.
pub fn build(spec: &LayerSpec, seed: u64) -> Layer<f64> {
    let mut r = rng::stream(seed, &[1]);
    let mut layer = Layer::<f64>::build(spec, &mut r).unwrap();
    let normal = Normal::new(0.0, 0.2).unwrap();
    for (_, p) in layer.params_mut() {
        for v in p.value.data_mut() {
            *v += normal.sample(&mut r);
        }
    }
    layer
}

/// Runs every layer case; returns (label, report).
pub fn layer_suite() -> Vec<(String, &'static str, GradReport)> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let seed = 100 + i as u64;
            let mut layer = build(&c.spec, seed);
            let x = random_tensor(&c.input, seed ^ 0xabc).unwrap();
            let report = gradcheck::check_layer(&mut layer, &x, Mode::Training, seed).unwrap();
            (format!("{} {:?}", c.family, c.input), c.family, report)
        })
        .collect()
}

/// Fused softmax + cross-entropy checks on three logit shapes.
pub fn softmax_cce_suite() -> Vec<(String, f64)> {
    [(2usize, 2usize), (4, 3), (3, 5)]
        .iter()
        .enumerate()
        .map(|(i, &(n, k))| {
            let z = random_tensor(&[n, k], 500 + i as u64).unwrap();
            let mut y = vec![0.0; n * k];
            for r in 0..n {
                y[r * k + (r * 7 + i) % k] = 1.0;
            }
            let y = lesionforge::Tensor::from_vec(&[n, k], y).unwrap();
            (format!("softmax_cce [{n}, {k}]"), gradcheck::check_softmax_cce(&z, &y).unwrap())
        })
        .collect()
}
