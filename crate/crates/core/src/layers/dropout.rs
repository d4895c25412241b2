use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{missing_forward, Backprop, LayerSpec, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Inverted dropout.
///
/// In training mode each element draws `u = rng.random::<f64>()` from a
/// ChaCha8 stream, in row-major order, and survives when `u >= rate`.
/// Survivors are scaled by `1 / (1 - rate)`. Evaluation mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    name: String,
    rate: f64,
    rng: ChaCha8Rng,
    /// Scaled keep mask of the last training forward; `None` after an evaluation forward.
    mask: Option<Option<Vec<T>>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(name: &str, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "{name}: dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::Dropout {
            name: self.name.clone(),
            rate: self.rate,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Evaluation => {
                self.mask = Some(None);
                Ok(x.clone())
            }
            Mode::Training => {
                let keep_scale = T::from_f64(1.0 / (1.0 - self.rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| {
                        if self.rng.random::<f64>() >= self.rate {
                            keep_scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let y = x.zip_map(&Tensor::from_vec(x.shape(), mask.clone())?, |a, m| a * m)?;
                self.mask = Some(Some(mask));
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>, _pass: Backprop) -> Result<Tensor<T>> {
        match self.mask.as_ref().ok_or_else(|| missing_forward(&self.name))? {
            None => Ok(dy.clone()),
            Some(mask) => dy.zip_map(&Tensor::from_vec(dy.shape(), mask.clone())?, |g, m| g * m),
        }
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
