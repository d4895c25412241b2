//! Layer forward/backward passes and the composite blocks.
//!
//! Every layer caches what its backward pass needs during `forward`. Calling
//! `backward` without a preceding `forward` is a [`Error::State`].
//!
//! Layers are described by a serializable [`LayerSpec`]; the same spec list
//! doubles as the model topology manifest stored in checkpoints.

mod activation;
mod blocks;
mod conv;
mod dense;
mod dropout;
mod norm;
mod pool;

pub use activation::{softmax, softmax_backward, LeakyRelu, DEFAULT_LEAKY_SLOPE};
pub use blocks::{DenseBlock, ResidualBlock};
pub use conv::{Conv2d, SeparableConv2d};
pub use dense::Dense;
pub use dropout::Dropout;
pub use norm::{BatchNorm, BN_EPS, BN_MOMENTUM};
pub use pool::{Pool, PoolKind};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Training,
    Evaluation,
}

/// What a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backprop {
    /// Input gradient and all parameter gradients. Requires a training-mode
    /// forward for batch norm.
    Full,
    /// Input gradient only; parameter gradients are left untouched. Also valid
    /// after an evaluation-mode forward (frozen batch norm is affine).
    InputOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// A learnable tensor and its gradient buffer (always the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = value.zeros_like();
        Self { value, grad }
    }

    pub(crate) fn set_grad(&mut self, grad: Tensor<T>) -> Result<()> {
        self.value.expect_same_shape(&grad)?;
        self.grad = grad;
        Ok(())
    }
}

/// He-normal initialisation: `N(0, 2 / fan_in)`.
pub(crate) fn he_normal<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len).map(|_| T::from_f64(normal.sample(rng))).collect(),
    )
}

pub(crate) fn missing_forward(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called before forward"))
}

/// Serializable description of one layer or block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    SeparableConv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        name: String,
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    MaxPool {
        name: String,
        size: usize,
        stride: usize,
    },
    AvgPool {
        name: String,
        size: usize,
        stride: usize,
    },
    Flatten {
        name: String,
    },
    Dropout {
        name: String,
        rate: f64,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    LeakyRelu {
        name: String,
        slope: f64,
    },
    Residual {
        name: String,
        channels: usize,
        kernel: usize,
        slope: f64,
    },
    DenseBlock {
        name: String,
        in_channels: usize,
        growth: usize,
        layers: usize,
        kernel: usize,
        slope: f64,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv2d { name, .. }
            | LayerSpec::SeparableConv2d { name, .. }
            | LayerSpec::BatchNorm { name, .. }
            | LayerSpec::MaxPool { name, .. }
            | LayerSpec::AvgPool { name, .. }
            | LayerSpec::Flatten { name }
            | LayerSpec::Dropout { name, .. }
            | LayerSpec::Dense { name, .. }
            | LayerSpec::LeakyRelu { name, .. }
            | LayerSpec::Residual { name, .. }
            | LayerSpec::DenseBlock { name, .. } => name,
        }
    }

    /// Whether the layer emits convolutional feature maps (a valid Grad-CAM target).
    pub fn is_convolutional(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. }
                | LayerSpec::SeparableConv2d { .. }
                | LayerSpec::Residual { .. }
                | LayerSpec::DenseBlock { .. }
        )
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    SeparableConv2d(SeparableConv2d<T>),
    BatchNorm(BatchNorm<T>),
    Pool(Pool<T>),
    Flatten(Flatten),
    Dropout(Dropout<T>),
    Dense(Dense<T>),
    LeakyRelu(LeakyRelu<T>),
    Residual(Box<ResidualBlock<T>>),
    DenseBlock(Box<DenseBlock<T>>),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Conv2d($l) => $body,
            Layer::SeparableConv2d($l) => $body,
            Layer::BatchNorm($l) => $body,
            Layer::Pool($l) => $body,
            Layer::Flatten($l) => $body,
            Layer::Dropout($l) => $body,
            Layer::Dense($l) => $body,
            Layer::LeakyRelu($l) => $body,
            Layer::Residual($l) => $body,
            Layer::DenseBlock($l) => $body,
        }
    };
}

impl<T: Real> Layer<T> {
    pub fn build<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        Ok(match spec {
            LayerSpec::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(
                name,
                *in_channels,
                *out_channels,
                *kernel,
                *stride,
                *padding,
                rng,
            )?),
            LayerSpec::SeparableConv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::SeparableConv2d(SeparableConv2d::new(
                name,
                *in_channels,
                *out_channels,
                *kernel,
                *stride,
                *padding,
                rng,
            )?),
            LayerSpec::BatchNorm {
                name,
                channels,
                eps,
                momentum,
            } => Layer::BatchNorm(BatchNorm::with_config(name, *channels, *eps, *momentum)?),
            LayerSpec::MaxPool { name, size, stride } => {
                Layer::Pool(Pool::new(name, PoolKind::Max, *size, *stride)?)
            }
            LayerSpec::AvgPool { name, size, stride } => {
                Layer::Pool(Pool::new(name, PoolKind::Avg, *size, *stride)?)
            }
            LayerSpec::Flatten { name } => Layer::Flatten(Flatten::new(name)),
            LayerSpec::Dropout { name, rate } => Layer::Dropout(Dropout::new(name, *rate, 0)?),
            LayerSpec::Dense {
                name,
                in_features,
                out_features,
            } => Layer::Dense(Dense::new(name, *in_features, *out_features, rng)?),
            LayerSpec::LeakyRelu { name, slope } => {
                Layer::LeakyRelu(LeakyRelu::new(name, T::from_f64(*slope))?)
            }
            LayerSpec::Residual {
                name,
                channels,
                kernel,
                slope,
            } => Layer::Residual(Box::new(ResidualBlock::new(
                name,
                *channels,
                *kernel,
                T::from_f64(*slope),
                rng,
            )?)),
            LayerSpec::DenseBlock {
                name,
                in_channels,
                growth,
                layers,
                kernel,
                slope,
            } => Layer::DenseBlock(Box::new(DenseBlock::new(
                name,
                *in_channels,
                *growth,
                *layers,
                *kernel,
                T::from_f64(*slope),
                rng,
            )?)),
        })
    }

    pub fn spec(&self) -> LayerSpec {
        dispatch!(self, l => l.spec())
    }

    pub fn name(&self) -> &str {
        dispatch!(self, l => l.name())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        dispatch!(self, l => l.forward(x, mode))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        dispatch!(self, l => l.backward(dy, pass))
    }

    /// Output shape for a given input shape, validating channel/feature agreement.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        dispatch!(self, l => l.output_shape(input))
    }

    /// Learnable tensors with names relative to this layer (e.g. `weight`, `conv1.bias`).
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        dispatch!(self, l => l.params())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        dispatch!(self, l => l.params_mut())
    }

    /// Non-learned persistent tensors (batch-norm running statistics).
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        dispatch!(self, l => l.state())
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        dispatch!(self, l => l.state_mut())
    }

    /// Resets any internal random stream (dropout) to a seed-derived state.
    pub fn reseed(&mut self, seed: u64) {
        if let Layer::Dropout(d) = self {
            d.reseed(seed);
        }
    }
}

/// Prefixes child names: `("conv1", [("weight", p)])` → `conv1.weight`.
pub(crate) fn prefixed<V>(prefix: &str, items: Vec<(String, V)>) -> Vec<(String, V)> {
    items
        .into_iter()
        .map(|(n, v)| (format!("{prefix}.{n}"), v))
        .collect()
}

/// Order-preserving reshape `[N, ...] -> [N, prod(rest)]`.
#[derive(Debug, Clone)]
pub struct Flatten {
    name: String,
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            input_shape: None,
        }
    }

    fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten {
            name: self.name.clone(),
        }
    }

    fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() < 2 {
            return Err(crate::error::shape_err(format!(
                "flatten needs rank >= 2, got {input:?}"
            )));
        }
        Ok(vec![input[0], input[1..].iter().product()])
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out = self.output_shape(x.shape())?;
        self.input_shape = Some(x.shape().to_vec());
        x.clone().reshape(&out)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>, _pass: Backprop) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| missing_forward(&self.name))?;
        dy.clone().reshape(shape)
    }

    fn params<T>(&self) -> Vec<(String, &Param<T>)> {
        Vec::new()
    }

    fn params_mut<T>(&mut self) -> Vec<(String, &mut Param<T>)> {
        Vec::new()
    }

    fn state<T>(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    fn state_mut<T>(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }
}

/// Reorders `[N, C, P]` (P = H*W) into a `[C, N*P]` matrix.
pub(crate) fn nchw_to_cmat<T: Real>(data: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for b in 0..n {
        for ch in 0..c {
            let src = &data[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`nchw_to_cmat`].
pub(crate) fn cmat_to_nchw<T: Real>(data: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for ch in 0..c {
        for b in 0..n {
            let src = &data[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}
