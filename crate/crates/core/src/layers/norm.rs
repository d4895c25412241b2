use super::{missing_forward, Backprop, LayerSpec, Mode, Param};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone)]
enum BnCache<T> {
    Training {
        shape: Vec<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Evaluation {
        shape: Vec<usize>,
    },
}

/// Per-channel batch normalisation over `[N,C,H,W]` (or `[N,C]`) input.
///
/// Training mode normalises with the batch mean and population variance and
/// folds them into the running statistics:
/// `running = momentum * running + (1 - momentum) * batch`.
/// Evaluation mode uses the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    name: String,
    channels: usize,
    eps: f64,
    momentum: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Result<Self> {
        Self::with_config(name, channels, BN_EPS, BN_MOMENTUM)
    }

    pub fn with_config(name: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "{name}: batch norm needs eps > 0 and momentum in [0,1), got {eps}, {momentum}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            channels,
            eps,
            momentum,
            gamma: Param::new(Tensor::full(&[channels], T::one())?),
            beta: Param::new(Tensor::zeros(&[channels])?),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            cache: None,
        })
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::BatchNorm {
            name: self.name.clone(),
            channels: self.channels,
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let c = match input {
            [_, c, _, _] | [_, c] => *c,
            _ => {
                return Err(shape_err(format!(
                    "{}: expected [N,C,H,W] or [N,C], got {input:?}",
                    self.name
                )))
            }
        };
        if c != self.channels {
            return Err(shape_err(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.channels
            )));
        }
        Ok(input.to_vec())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let (n, c, h, w) = x.nchw()?;
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64(self.eps);
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];

        match mode {
            Mode::Training => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "{}: training-mode batch norm needs N*H*W >= 2, got {count}",
                        self.name
                    )));
                }
                let m = T::from_f64(self.momentum);
                let mut xhat = vec![T::zero(); src.len()];
                let mut inv_std = vec![T::zero(); c];
                for ch in 0..c {
                    let mut mean = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        mean += src[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    mean /= count as f64;
                    let mut var = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        var += src[base..base + plane]
                            .iter()
                            .map(|v| (v.as_f64() - mean).powi(2))
                            .sum::<f64>();
                    }
                    var /= count as f64;
                    let istd = T::from_f64(1.0 / (var + self.eps).sqrt());
                    let (mean_t, g, bt) = (
                        T::from_f64(mean),
                        self.gamma.value.data()[ch],
                        self.beta.value.data()[ch],
                    );
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            let xh = (src[i] - mean_t) * istd;
                            xhat[i] = xh;
                            out[i] = g * xh + bt;
                        }
                    }
                    inv_std[ch] = istd;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = m * *rm + (T::one() - m) * mean_t;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = m * *rv + (T::one() - m) * T::from_f64(var);
                }
                self.cache = Some(BnCache::Training {
                    shape: x.shape().to_vec(),
                    xhat,
                    inv_std,
                });
            }
            Mode::Evaluation => {
                for ch in 0..c {
                    let istd = T::one() / (self.running_var.data()[ch] + eps).sqrt();
                    let mean = self.running_mean.data()[ch];
                    let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            out[i] = g * (src[i] - mean) * istd + bt;
                        }
                    }
                }
                self.cache = Some(BnCache::Evaluation {
                    shape: x.shape().to_vec(),
                });
            }
        }
        Tensor::from_vec(x.shape(), out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward(&self.name))?;
        match cache {
            BnCache::Evaluation { shape } => {
                if pass == Backprop::Full {
                    return Err(Error::State(format!(
                        "{}: parameter gradients need a training-mode forward",
                        self.name
                    )));
                }
                if dy.shape() != shape.as_slice() {
                    return Err(shape_err(format!("{}: gradient shape mismatch", self.name)));
                }
                let (n, c, h, w) = dy.nchw()?;
                let plane = h * w;
                let eps = T::from_f64(self.eps);
                let mut dx = dy.data().to_vec();
                for ch in 0..c {
                    let scale = self.gamma.value.data()[ch] / (self.running_var.data()[ch] + eps).sqrt();
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        dx[base..base + plane].iter_mut().for_each(|v| *v *= scale);
                    }
                }
                Tensor::from_vec(shape, dx)
            }
            BnCache::Training {
                shape,
                xhat,
                inv_std,
            } => {
                if dy.shape() != shape.as_slice() {
                    return Err(shape_err(format!("{}: gradient shape mismatch", self.name)));
                }
                let (n, c, h, w) = dy.nchw()?;
                let plane = h * w;
                let count = T::from_f64((n * plane) as f64);
                let g = dy.data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy += g[i];
                            sum_dy_xhat += g[i] * xhat[i];
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let gamma = self.gamma.value.data()[ch];
                    let k = gamma * inv_std[ch] / count;
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dx[i] = k * (count * g[i] - sum_dy - xhat[i] * sum_dy_xhat);
                        }
                    }
                }
                if pass == Backprop::Full {
                    self.gamma.set_grad(Tensor::from_vec(&[c], dgamma)?)?;
                    self.beta.set_grad(Tensor::from_vec(&[c], dbeta)?)?;
                }
                Tensor::from_vec(shape, dx)
            }
        }
    }

    pub(super) fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    pub(super) fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    pub(super) fn state(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    pub(super) fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}
