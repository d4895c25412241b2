//! Reference toy architecture combining every block type.

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Padding, BN_EPS, BN_MOMENTUM, DEFAULT_LEAKY_SLOPE};
use crate::model::{Model, ModelSpec};
use crate::tensor::Real;

pub const MIN_IMAGE_SIZE: usize = 16;

const STEM: usize = 8;
const GROWTH: usize = 4;
const DENSE_LAYERS: usize = 2;
const HIDDEN: usize = 64;
const DROPOUT: f64 = 0.5;

fn leaky(name: &str) -> LayerSpec {
    LayerSpec::LeakyRelu {
        name: name.into(),
        slope: DEFAULT_LEAKY_SLOPE,
    }
}

fn pool(name: &str) -> LayerSpec {
    LayerSpec::MaxPool {
        name: name.into(),
        size: 2,
        stride: 2,
    }
}

/// Topology for `image_size x image_size` RGB inputs.
///
/// stem conv, residual block, dense block and separable conv, each followed by a
/// 2x2 max pool stage, then dense(64), leaky ReLU, batch norm, dropout(0.5)
/// and a two-way dense head.
pub fn papernet_spec(image_size: usize) -> Result<ModelSpec> {
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image size {image_size} is too small for three pooling stages (minimum {MIN_IMAGE_SIZE})"
        )));
    }
    let dense_out = STEM + DENSE_LAYERS * GROWTH;
    let side = image_size / 2 / 2 / 2;
    let layers = vec![
        LayerSpec::Conv2d {
            name: "stem".into(),
            in_channels: 3,
            out_channels: STEM,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        },
        leaky("stem_act"),
        pool("pool1"),
        LayerSpec::Residual {
            name: "res1".into(),
            channels: STEM,
            kernel: 3,
            slope: DEFAULT_LEAKY_SLOPE,
        },
        pool("pool2"),
        LayerSpec::DenseBlock {
            name: "dense1".into(),
            in_channels: STEM,
            growth: GROWTH,
            layers: DENSE_LAYERS,
            kernel: 3,
            slope: DEFAULT_LEAKY_SLOPE,
        },
        LayerSpec::SeparableConv2d {
            name: "sep1".into(),
            in_channels: dense_out,
            out_channels: dense_out,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        },
        leaky("sep_act"),
        pool("pool3"),
        LayerSpec::Flatten { name: "flatten".into() },
        LayerSpec::Dense {
            name: "fc1".into(),
            in_features: dense_out * side * side,
            out_features: HIDDEN,
        },
        leaky("fc1_act"),
        LayerSpec::BatchNorm {
            name: "fc1_bn".into(),
            channels: HIDDEN,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        },
        LayerSpec::Dropout {
            name: "dropout".into(),
            rate: DROPOUT,
        },
        LayerSpec::Dense {
            name: "logits".into(),
            in_features: HIDDEN,
            out_features: 2,
        },
    ];
    Ok(ModelSpec {
        input_channels: 3,
        image_size,
        num_classes: 2,
        layers,
    })
}

pub fn build_papernet<T: Real>(image_size: usize, seed: u64) -> Result<Model<T>> {
    Model::from_spec(papernet_spec(image_size)?, seed)
}
