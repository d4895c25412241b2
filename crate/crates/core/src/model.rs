//! Sequential model over [`Layer`]s with a softmax output head.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{softmax, Backprop, Layer, LayerSpec, Mode, Param};
use crate::rng::{self, purpose};
use crate::tensor::{Real, Tensor};

/// Topology manifest: enough to rebuild a model with freshly initialised weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Copy of every parameter and state tensor, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub params: Vec<Tensor<T>>,
    pub state: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
    mode: Mode,
}

impl<T: Real> Model<T> {
    /// Builds and validates a model; weights are drawn from the `seed`-derived init stream.
    pub fn from_spec(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut init = rng::stream(seed, &[purpose::INIT]);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut names = std::collections::HashSet::new();
        for ls in &spec.layers {
            if !names.insert(ls.name().to_string()) {
                return Err(Error::Config(format!("duplicate layer name {:?}", ls.name())));
            }
            layers.push(Layer::build(ls, &mut init)?);
        }
        let model = Self {
            spec,
            layers,
            mode: Mode::Training,
        };
        let out = model.output_shape(1)?;
        if out != [1, model.spec.num_classes] {
            return Err(shape_err(format!(
                "model emits {out:?}, expected [1, {}] logits",
                model.spec.num_classes
            )));
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.spec.input_channels, self.spec.image_size, self.spec.image_size]
    }

    /// Output shape of every layer for a batch of `batch`, in order.
    pub fn layer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape(batch).to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, batch: usize) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes(batch)?
            .pop()
            .unwrap_or_else(|| self.input_shape(batch).to_vec()))
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == name)
    }

    /// Pre-softmax class scores.
    pub fn forward_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with_tap(x, None).map(|(z, _)| z)
    }

    /// Class probabilities.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax(&self.forward_logits(x)?)
    }

    /// Forward pass that also returns the output of layer `tap`.
    pub fn forward_with_tap(
        &mut self,
        x: &Tensor<T>,
        tap: Option<usize>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let expected = self.input_shape(x.shape().first().copied().unwrap_or(0));
        if x.shape() != expected {
            return Err(shape_err(format!(
                "model expects input {expected:?}, got {:?}",
                x.shape()
            )));
        }
        let mode = self.mode;
        let mut h = x.clone();
        let mut tapped = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h, mode)?;
            if tap == Some(i) {
                tapped = Some(h.clone());
            }
        }
        Ok((h, tapped))
    }

    /// Backpropagates a logit gradient through every layer and returns the input gradient.
    pub fn backward(&mut self, dlogits: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        let mut g = dlogits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g, pass)?;
        }
        Ok(g)
    }

    /// Backpropagates a logit gradient down to the output of layer `stop` (input gradients only).
    pub fn backward_to(&mut self, dlogits: &Tensor<T>, stop: usize) -> Result<Tensor<T>> {
        if stop >= self.layers.len() {
            return Err(Error::Config(format!("layer index {stop} out of range")));
        }
        let mut g = dlogits.clone();
        for layer in self.layers[stop + 1..].iter_mut().rev() {
            g = layer.backward(&g, Backprop::InputOnly)?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                let prefix = l.name().to_string();
                l.params()
                    .into_iter()
                    .map(move |(n, p)| (format!("{prefix}.{n}"), p))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let prefix = l.name().to_string();
                l.params_mut()
                    .into_iter()
                    .map(move |(n, p)| (format!("{prefix}.{n}"), p))
            })
            .collect()
    }

    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|l| {
                let prefix = l.name().to_string();
                l.state()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let prefix = l.name().to_string();
                l.state_mut()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Re-keys every dropout stream from `seed`; called once per training step.
    pub fn reseed(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.reseed(rng::derive_seed(seed, &[purpose::DROPOUT, i as u64]));
        }
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot {
            params: self.params().into_iter().map(|(_, p)| p.value.clone()).collect(),
            state: self.state().into_iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    pub fn restore(&mut self, snap: &Snapshot<T>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != snap.params.len() {
            return Err(Error::State("snapshot does not match model topology".into()));
        }
        for ((name, p), v) in params.iter_mut().zip(&snap.params) {
            if p.value.shape() != v.shape() {
                return Err(shape_err(format!("snapshot tensor {name} has the wrong shape")));
            }
            p.value = v.clone();
        }
        let mut state = self.state_mut();
        if state.len() != snap.state.len() {
            return Err(Error::State("snapshot does not match model topology".into()));
        }
        for ((name, t), v) in state.iter_mut().zip(&snap.state) {
            if t.shape() != v.shape() {
                return Err(shape_err(format!("snapshot tensor {name} has the wrong shape")));
            }
            **t = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Padding;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_channels: 1,
            image_size: 4,
            num_classes: 2,
            layers: vec![
                LayerSpec::Conv2d {
                    name: "conv".into(),
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Flatten { name: "flat".into() },
                LayerSpec::Dense {
                    name: "fc".into(),
                    in_features: 32,
                    out_features: 2,
                },
            ],
        }
    }

    #[test]
    fn builds_and_names_params() {
        let m = Model::<f32>::from_spec(tiny_spec(), 1).unwrap();
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["conv.weight", "conv.bias", "fc.weight", "fc.bias"]);
        assert_eq!(m.parameter_count(), 2 * 9 + 2 + 32 * 2 + 2);
    }

    #[test]
    fn rejects_mismatched_topology() {
        let mut spec = tiny_spec();
        spec.layers[2] = LayerSpec::Dense {
            name: "fc".into(),
            in_features: 31,
            out_features: 2,
        };
        assert!(matches!(Model::<f32>::from_spec(spec, 1), Err(Error::Shape(_))));
        let mut spec = tiny_spec();
        spec.layers[1] = LayerSpec::Flatten { name: "conv".into() };
        assert!(matches!(Model::<f32>::from_spec(spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut m = Model::<f32>::from_spec(tiny_spec(), 1).unwrap();
        let snap = m.snapshot();
        for (_, p) in m.params_mut() {
            p.value = p.value.map(|v| v + 1.0);
        }
        assert_ne!(m.snapshot(), snap);
        m.restore(&snap).unwrap();
        assert_eq!(m.snapshot(), snap);
    }

    #[test]
    fn wrong_input_shape() {
        let mut m = Model::<f32>::from_spec(tiny_spec(), 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }
}
