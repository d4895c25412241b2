//! Central finite-difference gradient checks in 64-bit precision.
//!
//! The scalar under test is `L = sum(w * f(x))` with fixed random weights `w`,
//! so `dL/dy = w` is what gets backpropagated. Dropout streams are re-keyed
//! before every forward so the mask stays fixed across perturbations.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::layers::{softmax, Backprop, Layer, Mode, Param};
use crate::model::Model;
use crate::optim::categorical_crossentropy;
use crate::rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Relative error per checked tensor (`"input"` plus every parameter).
#[derive(Debug, Clone)]
pub struct GradReport {
    pub entries: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// `max|a - n| / max(|a|_inf, |n|_inf, SCALE_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(SCALE_FLOOR, f64::max);
    diff / scale
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    let mut r = rng::stream(seed, &[]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(&mut r)).collect())
}

trait Subject {
    fn run(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn back(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn named_params(&mut self) -> Vec<(String, &mut Param<f64>)>;
}

struct LayerSubject<'a> {
    layer: &'a mut Layer<f64>,
    mode: Mode,
    seed: u64,
}

impl Subject for LayerSubject<'_> {
    fn run(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.reseed(self.seed);
        self.layer.forward(x, self.mode)
    }
    fn back(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.layer.backward(dy, Backprop::Full)
    }
    fn named_params(&mut self) -> Vec<(String, &mut Param<f64>)> {
        self.layer.params_mut()
    }
}

struct ModelSubject<'a> {
    model: &'a mut Model<f64>,
    seed: u64,
}

impl Subject for ModelSubject<'_> {
    fn run(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.model.reseed(self.seed);
        self.model.forward_logits(x)
    }
    fn back(&mut self, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.model.backward(dy, Backprop::Full)
    }
    fn named_params(&mut self) -> Vec<(String, &mut Param<f64>)> {
        self.model.params_mut()
    }
}

fn check<S: Subject>(subject: &mut S, x: &Tensor<f64>, seed: u64) -> Result<GradReport> {
    let y = subject.run(x)?;
    let w = random_tensor(y.shape(), rng::derive_seed(seed, &[0x57]))?;
    let dx = subject.back(&w)?;
    let analytic: Vec<(String, Vec<f64>)> = subject
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.data().to_vec()))
        .collect();

    let loss = |s: &mut S, x: &Tensor<f64>| -> Result<f64> { s.run(x)?.dot(&w) };

    let mut entries = Vec::with_capacity(analytic.len() + 1);
    let mut numeric = Vec::with_capacity(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let lp = loss(subject, &xp)?;
        xp.data_mut()[i] = orig - STEP;
        let lm = loss(subject, &xp)?;
        xp.data_mut()[i] = orig;
        numeric.push((lp - lm) / (2.0 * STEP));
    }
    entries.push(("input".to_string(), relative_error(dx.data(), &numeric)));

    for (k, (name, grad)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = subject.named_params()[k].1.value.data()[j];
            subject.named_params()[k].1.value.data_mut()[j] = orig + STEP;
            let lp = loss(subject, x)?;
            subject.named_params()[k].1.value.data_mut()[j] = orig - STEP;
            let lm = loss(subject, x)?;
            subject.named_params()[k].1.value.data_mut()[j] = orig;
            numeric.push((lp - lm) / (2.0 * STEP));
        }
        entries.push((name.clone(), relative_error(grad, &numeric)));
    }
    Ok(GradReport { entries })
}

/// Checks input and parameter gradients of a single layer.
pub fn check_layer(layer: &mut Layer<f64>, x: &Tensor<f64>, mode: Mode, seed: u64) -> Result<GradReport> {
    check(&mut LayerSubject { layer, mode, seed }, x, seed)
}

/// Checks input and parameter gradients of a whole model's logits in its current mode.
pub fn check_model(model: &mut Model<f64>, x: &Tensor<f64>, seed: u64) -> Result<GradReport> {
    check(&mut ModelSubject { model, seed }, x, seed)
}

/// Checks the fused softmax + cross-entropy logit gradient for logits `z` and one-hot `y`.
pub fn check_softmax_cce(z: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (_, dz) = categorical_crossentropy(&softmax(z)?, y)?;
    let mut zp = z.clone();
    let mut numeric = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let orig = zp.data()[i];
        zp.data_mut()[i] = orig + STEP;
        let lp = categorical_crossentropy(&softmax(&zp)?, y)?.0;
        zp.data_mut()[i] = orig - STEP;
        let lm = categorical_crossentropy(&softmax(&zp)?, y)?.0;
        zp.data_mut()[i] = orig;
        numeric.push((lp - lm) / (2.0 * STEP));
    }
    Ok(relative_error(dz.data(), &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert!(relative_error(&[0.0], &[1e-12]) < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A dense layer whose weight gradient is tampered with must fail the check.
        let spec = LayerSpec::Dense {
            name: "fc".into(),
            in_features: 3,
            out_features: 2,
        };
        let mut layer = Layer::<f64>::build(&spec, &mut rng::stream(1, &[])).unwrap();
        let x = random_tensor(&[2, 3], 9).unwrap();
        let good = check_layer(&mut layer, &x, Mode::Training, 3).unwrap();
        assert!(good.max_error() < 1e-6, "{good:?}");

        let y = layer.forward(&x, Mode::Training).unwrap();
        let w = random_tensor(y.shape(), rng::derive_seed(3, &[0x57])).unwrap();
        layer.backward(&w, Backprop::Full).unwrap();
        let analytic = layer.params()[0].1.grad.data().to_vec();
        let bumped: Vec<f64> = analytic.iter().map(|g| g * 1.01).collect();
        assert!(relative_error(&bumped, &analytic) > 1e-3);
    }
}
