use std::marker::PhantomData;

use super::{missing_forward, Backprop, LayerSpec, Mode, Param};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
struct PoolCache {
    input_shape: Vec<usize>,
    out_hw: (usize, usize),
    /// Flat input index of each output's maximum (max pooling only).
    argmax: Vec<usize>,
}

/// Unpadded square-window pooling. Output size is `floor((H - size) / stride) + 1`.
#[derive(Debug, Clone)]
pub struct Pool<T> {
    name: String,
    kind: PoolKind,
    size: usize,
    stride: usize,
    cache: Option<PoolCache>,
    _marker: PhantomData<T>,
}

impl<T: Real> Pool<T> {
    pub fn new(name: &str, kind: PoolKind, size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(shape_err(format!("{name}: pool size and stride must be positive")));
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            size,
            stride,
            cache: None,
            _marker: PhantomData,
        })
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub(super) fn spec(&self) -> LayerSpec {
        let (name, size, stride) = (self.name.clone(), self.size, self.stride);
        match self.kind {
            PoolKind::Max => LayerSpec::MaxPool { name, size, stride },
            PoolKind::Avg => LayerSpec::AvgPool { name, size, stride },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [n, c, h, w] = *input else {
            return Err(shape_err(format!("{}: expected [N,C,H,W], got {input:?}", self.name)));
        };
        if self.size > h || self.size > w {
            return Err(shape_err(format!(
                "{}: window {} larger than input {h}x{w}",
                self.name, self.size
            )));
        }
        Ok(vec![
            n,
            c,
            (h - self.size) / self.stride + 1,
            (w - self.size) / self.stride + 1,
        ])
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let (n, c, h, w) = x.nchw()?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let src = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::new();
        let inv_area = T::one() / T::from_f64((self.size * self.size) as f64);
        for plane_idx in 0..n * c {
            let base = plane_idx * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * self.stride, ox * self.stride);
                    match self.kind {
                        PoolKind::Max => {
                            // Strict `>` keeps the first maximum in row-major scan order.
                            let mut best_idx = base + y0 * w + x0;
                            let mut best = src[best_idx];
                            for i in 0..self.size {
                                for j in 0..self.size {
                                    let idx = base + (y0 + i) * w + x0 + j;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out.push(best);
                            argmax.push(best_idx);
                        }
                        PoolKind::Avg => {
                            let mut s = T::zero();
                            for i in 0..self.size {
                                let row = base + (y0 + i) * w + x0;
                                s += src[row..row + self.size].iter().copied().sum::<T>();
                            }
                            out.push(s * inv_area);
                        }
                    }
                }
            }
        }
        self.cache = Some(PoolCache {
            input_shape: x.shape().to_vec(),
            out_hw: (ho, wo),
            argmax,
        });
        Tensor::from_vec(&out_shape, out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, _pass: Backprop) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward(&self.name))?;
        let (n, c, h, w) = (
            cache.input_shape[0],
            cache.input_shape[1],
            cache.input_shape[2],
            cache.input_shape[3],
        );
        let (ho, wo) = cache.out_hw;
        if dy.shape() != [n, c, ho, wo] {
            return Err(shape_err(format!(
                "{}: gradient {:?} does not match output [{n},{c},{ho},{wo}]",
                self.name,
                dy.shape()
            )));
        }
        let mut dx = vec![T::zero(); n * c * h * w];
        let g = dy.data();
        match self.kind {
            PoolKind::Max => {
                for (&idx, &v) in cache.argmax.iter().zip(g) {
                    dx[idx] += v;
                }
            }
            PoolKind::Avg => {
                let inv_area = T::one() / T::from_f64((self.size * self.size) as f64);
                for plane_idx in 0..n * c {
                    let base = plane_idx * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let share = g[(plane_idx * ho + oy) * wo + ox] * inv_area;
                            let (y0, x0) = (oy * self.stride, ox * self.stride);
                            for i in 0..self.size {
                                let row = base + (y0 + i) * w + x0;
                                dx[row..row + self.size].iter_mut().for_each(|d| *d += share);
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&cache.input_shape, dx)
    }

    pub(super) fn params(&self) -> Vec<(String, &Param<T>)> {
        Vec::new()
    }

    pub(super) fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        Vec::new()
    }

    pub(super) fn state(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    pub(super) fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }
}
