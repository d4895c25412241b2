//! Composite blocks: identity-skip residual block and dense (concatenating) block.

use rand::Rng;

use super::{prefixed, Backprop, BatchNorm, Conv2d, LayerSpec, LeakyRelu, Mode, Padding, Param};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// `out = act(bn2(conv2(act(bn1(conv1(x))))) + x)`, both convs `C -> C` with same padding.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    name: String,
    channels: usize,
    kernel: usize,
    slope: T,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    act1: LeakyRelu<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    act_out: LeakyRelu<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        channels: usize,
        kernel: usize,
        slope: T,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            channels,
            kernel,
            slope,
            conv1: Conv2d::new("conv1", channels, channels, kernel, 1, Padding::Same, rng)?,
            bn1: BatchNorm::new("bn1", channels)?,
            act1: LeakyRelu::new("act1", slope)?,
            conv2: Conv2d::new("conv2", channels, channels, kernel, 1, Padding::Same, rng)?,
            bn2: BatchNorm::new("bn2", channels)?,
            act_out: LeakyRelu::new("act_out", slope)?,
        })
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::Residual {
            name: self.name.clone(),
            channels: self.channels,
            kernel: self.kernel,
            slope: self.slope.as_f64(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let inner = self.conv1.output_shape(input).map_err(|e| {
            shape_err(format!("{}: skip connection needs matching channels: {e}", self.name))
        })?;
        let inner = self.conv2.output_shape(&inner)?;
        if inner != input {
            return Err(shape_err(format!(
                "{}: residual path {inner:?} does not match skip {input:?}",
                self.name
            )));
        }
        Ok(inner)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let h = self.conv1.forward(x, mode)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.act1.forward(&h, mode)?;
        let h = self.conv2.forward(&h, mode)?;
        let h = self.bn2.forward(&h, mode)?;
        self.act_out.forward(&h.add(x)?, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        let ds = self.act_out.backward(dy, pass)?;
        let g = self.bn2.backward(&ds, pass)?;
        let g = self.conv2.backward(&g, pass)?;
        let g = self.act1.backward(&g, pass)?;
        let g = self.bn1.backward(&g, pass)?;
        let g = self.conv1.backward(&g, pass)?;
        ds.add(&g)
    }

    pub(super) fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = prefixed("conv1", self.conv1.params());
        out.extend(prefixed("bn1", self.bn1.params()));
        out.extend(prefixed("conv2", self.conv2.params()));
        out.extend(prefixed("bn2", self.bn2.params()));
        out
    }

    pub(super) fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = prefixed("conv1", self.conv1.params_mut());
        out.extend(prefixed("bn1", self.bn1.params_mut()));
        out.extend(prefixed("conv2", self.conv2.params_mut()));
        out.extend(prefixed("bn2", self.bn2.params_mut()));
        out
    }

    pub(super) fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = prefixed("bn1", self.bn1.state());
        out.extend(prefixed("bn2", self.bn2.state()));
        out
    }

    pub(super) fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = prefixed("bn1", self.bn1.state_mut());
        out.extend(prefixed("bn2", self.bn2.state_mut()));
        out
    }
}

/// One BN -> activation -> conv unit of a dense block.
#[derive(Debug, Clone)]
pub struct DenseUnit<T> {
    pub bn: BatchNorm<T>,
    act: LeakyRelu<T>,
    pub conv: Conv2d<T>,
}

/// Unit `l` sees the channel concatenation of the block input and every earlier
/// unit's output and emits `growth` channels; the block returns the concatenation
/// of all of them, `in_channels + layers * growth` channels in total.
#[derive(Debug, Clone)]
pub struct DenseBlock<T> {
    name: String,
    in_channels: usize,
    growth: usize,
    kernel: usize,
    slope: T,
    pub units: Vec<DenseUnit<T>>,
    /// Channel counts of [input, unit outputs...] from the last forward.
    widths: Option<Vec<usize>>,
}

impl<T: Real> DenseBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        growth: usize,
        layers: usize,
        kernel: usize,
        slope: T,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || (layers > 0 && growth == 0) {
            return Err(Error::Config(format!(
                "{name}: dense block needs positive input channels and growth"
            )));
        }
        let units = (0..layers)
            .map(|l| {
                let c = in_channels + l * growth;
                Ok(DenseUnit {
                    bn: BatchNorm::new(&format!("unit{l}.bn"), c)?,
                    act: LeakyRelu::new(&format!("unit{l}.act"), slope)?,
                    conv: Conv2d::new(&format!("unit{l}.conv"), c, growth, kernel, 1, Padding::Same, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            in_channels,
            growth,
            kernel,
            slope,
            units,
            widths: None,
        })
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::DenseBlock {
            name: self.name.clone(),
            in_channels: self.in_channels,
            growth: self.growth,
            layers: self.units.len(),
            kernel: self.kernel,
            slope: self.slope.as_f64(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_channels(&self) -> usize {
        self.in_channels + self.units.len() * self.growth
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [n, c, h, w] = *input else {
            return Err(shape_err(format!("{}: expected [N,C,H,W], got {input:?}", self.name)));
        };
        if c != self.in_channels {
            return Err(shape_err(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.in_channels
            )));
        }
        Ok(vec![n, self.output_channels(), h, w])
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let mut features = vec![x.clone()];
        for unit in &mut self.units {
            let input = Tensor::concat_channels(&features.iter().collect::<Vec<_>>())?;
            let h = unit.bn.forward(&input, mode)?;
            let h = unit.act.forward(&h, mode)?;
            features.push(unit.conv.forward(&h, mode)?);
        }
        self.widths = Some(features.iter().map(|f| f.shape()[1]).collect());
        Tensor::concat_channels(&features.iter().collect::<Vec<_>>())
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        let widths = self
            .widths
            .clone()
            .ok_or_else(|| super::missing_forward(&self.name))?;
        let mut offset = 0;
        let mut grads = Vec::with_capacity(widths.len());
        for &w in &widths {
            grads.push(dy.slice_channels(offset, w)?);
            offset += w;
        }
        for (l, unit) in self.units.iter_mut().enumerate().rev() {
            let g = unit.conv.backward(&grads[l + 1], pass)?;
            let g = unit.act.backward(&g, pass)?;
            let g = unit.bn.backward(&g, pass)?;
            // Route the input gradient back to every concatenated contributor.
            let mut off = 0;
            for (src, &w) in widths[..=l].iter().enumerate() {
                let piece = g.slice_channels(off, w)?;
                grads[src].add_assign(&piece)?;
                off += w;
            }
        }
        Ok(grads.swap_remove(0))
    }

    pub(super) fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (l, u) in self.units.iter().enumerate() {
            out.extend(prefixed(&format!("unit{l}.bn"), u.bn.params()));
            out.extend(prefixed(&format!("unit{l}.conv"), u.conv.params()));
        }
        out
    }

    pub(super) fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (l, u) in self.units.iter_mut().enumerate() {
            out.extend(prefixed(&format!("unit{l}.bn"), u.bn.params_mut()));
            out.extend(prefixed(&format!("unit{l}.conv"), u.conv.params_mut()));
        }
        out
    }

    pub(super) fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, u) in self.units.iter().enumerate() {
            out.extend(prefixed(&format!("unit{l}.bn"), u.bn.state()));
        }
        out
    }

    pub(super) fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (l, u) in self.units.iter_mut().enumerate() {
            out.extend(prefixed(&format!("unit{l}.bn"), u.bn.state_mut()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_residual_path_is_identity_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ResidualBlock::<f64>::new("res", 2, 3, 0.01, &mut rng).unwrap();
        block.conv1.weight.value = block.conv1.weight.value.zeros_like();
        block.conv2.weight.value = block.conv2.weight.value.zeros_like();
        let x = random(&[2, 2, 4, 4], 1);
        let y = block.forward(&x, Mode::Training).unwrap();
        let expected = x.map(|v| if v >= 0.0 { v } else { 0.01 * v });
        assert_eq!(y, expected);
    }

    #[test]
    fn residual_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ResidualBlock::<f64>::new("res", 2, 3, 0.01, &mut rng).unwrap();
        let x = random(&[2, 2, 3, 3], 2);
        let y = block.forward(&x, Mode::Training).unwrap();
        let dx = block.backward(&y.zeros_like(), Backprop::Full).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for (_, p) in block.params() {
            assert!(p.grad.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn residual_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ResidualBlock::<f32>::new("res", 2, 3, 0.01, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        assert!(matches!(block.forward(&x, Mode::Training), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_dense_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = DenseBlock::<f64>::new("db", 3, 2, 0, 3, 0.01, &mut rng).unwrap();
        let x = random(&[1, 3, 4, 4], 3);
        assert_eq!(block.forward(&x, Mode::Training).unwrap(), x);
        assert_eq!(block.backward(&x, Backprop::Full).unwrap(), x);
    }

    #[test]
    fn dense_block_channel_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = DenseBlock::<f64>::new("db", 3, 2, 1, 3, 0.01, &mut rng).unwrap();
        let x = random(&[2, 3, 4, 4], 4);
        let y = block.forward(&x, Mode::Training).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
        // The block input passes through unchanged in the first channels.
        assert_eq!(y.slice_channels(0, 3).unwrap(), x);
    }
}
