use super::{missing_forward, Backprop, LayerSpec, Mode, Param};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `x` for `x >= 0`, `slope * x` otherwise. Slope 0 is plain ReLU.
///
/// The derivative at exactly 0 is taken from the positive branch (1).
#[derive(Debug, Clone)]
pub struct LeakyRelu<T> {
    name: String,
    slope: T,
    input: Option<Tensor<T>>,
}

impl<T: Real> LeakyRelu<T> {
    pub fn new(name: &str, slope: T) -> Result<Self> {
        if !(slope >= T::zero()) {
            return Err(Error::Config(format!("{name}: negative leaky slope {slope}")));
        }
        Ok(Self {
            name: name.to_string(),
            slope,
            input: None,
        })
    }

    pub fn relu(name: &str) -> Self {
        Self {
            name: name.to_string(),
            slope: T::zero(),
            input: None,
        }
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::LeakyRelu {
            name: self.name.clone(),
            slope: self.slope.as_f64(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let slope = self.slope;
        let y = x.map(|v| if v >= T::zero() { v } else { slope * v });
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, _pass: Backprop) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_forward(&self.name))?;
        let slope = self.slope;
        x.zip_map(dy, |xv, g| if xv >= T::zero() { g } else { slope * g })
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

/// Row-wise softmax of `[N, K]` logits, stabilised by subtracting the row max.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = *z.shape() else {
        return Err(shape_err(format!("softmax expects [N, K], got {:?}", z.shape())));
    };
    if k < 2 {
        return Err(shape_err("softmax needs at least two classes"));
    }
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::from_vec(z.shape(), out)
}

/// Vector-Jacobian product of softmax: `dz = p * (dp - <dp, p>)` per row.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, dp: &Tensor<T>) -> Result<Tensor<T>> {
    probs.expect_same_shape(dp)?;
    probs.expect_rank(2, "softmax_backward")?;
    let k = probs.shape()[1];
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.data().chunks(k).zip(dp.data().chunks(k)) {
        let inner: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(&a, &b)| a * (b - inner)));
    }
    Tensor::from_vec(probs.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn leaky_relu_piecewise() {
        let mut act = LeakyRelu::new("a", 0.1f64).unwrap();
        let x = Tensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap();
        let y = act.forward(&x, Mode::Training).unwrap();
        assert!((y.data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(&y.data()[1..], &[0.0, 3.0]);
        let g = act.backward(&Tensor::full(&[3], 1.0).unwrap(), Backprop::Full).unwrap();
        assert_eq!(g.data(), &[0.1, 1.0, 1.0]);
    }

    #[test]
    fn relu_is_zero_slope_leaky() {
        let x = Tensor::from_vec(&[4], vec![-1.5f32, -0.0, 0.5, 2.0]).unwrap();
        let a = LeakyRelu::relu("r").forward(&x, Mode::Training).unwrap();
        let b = LeakyRelu::new("l", 0.0).unwrap().forward(&x, Mode::Training).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data()[2..], [0.5, 2.0]);
    }

    #[test]
    fn negative_slope_rejected() {
        assert!(matches!(LeakyRelu::new("a", -0.1f32), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_fixed_points() {
        let p = softmax(&Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let z = Tensor::from_vec(&[1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let p = softmax(&z).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&Tensor::from_vec(&[1, 2], vec![1e4f32, -1e4]).unwrap()).unwrap();
        assert!(p.all_finite());
        assert_eq!(p.data()[0], 1.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 2..8),
            shift in -100.0f64..100.0,
        ) {
            let k = row.len();
            let z = Tensor::from_vec(&[1, k], row).unwrap();
            let p = softmax(&z).unwrap();
            let total: f64 = p.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted = softmax(&z.map(|v| v + shift)).unwrap();
            prop_assert!(p.max_abs_diff(&shifted).unwrap() < 1e-6);
        }
    }
}
