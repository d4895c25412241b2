use rand::Rng;

use super::{he_normal, missing_forward, Backprop, LayerSpec, Mode, Param};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};

/// Fully connected layer: `y = x W + b` with `W: [F, U]`, `b: [U]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    name: String,
    in_features: usize,
    out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(shape_err(format!("{name}: dense dims must be positive")));
        }
        Ok(Self {
            name: name.to_string(),
            in_features,
            out_features,
            weight: Param::new(he_normal(&[in_features, out_features], in_features, rng)?),
            bias: Param::new(Tensor::zeros(&[out_features])?),
            input: None,
        })
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::Dense {
            name: self.name.clone(),
            in_features: self.in_features,
            out_features: self.out_features,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, f] if f == self.in_features => Ok(vec![n, self.out_features]),
            _ => Err(shape_err(format!(
                "{}: expected [N, {}] input, got {input:?}",
                self.name, self.in_features
            ))),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        let n = out_shape[0];
        let mut out = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm_acc(
            x.data(),
            self.weight.value.data(),
            &mut out,
            n,
            self.in_features,
            self.out_features,
        );
        self.input = Some(x.clone());
        Tensor::from_vec(&out_shape, out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_forward(&self.name))?;
        let n = x.shape()[0];
        if dy.shape() != [n, self.out_features] {
            return Err(shape_err(format!(
                "{}: gradient {:?} does not match output [{n}, {}]",
                self.name,
                dy.shape(),
                self.out_features
            )));
        }
        let (f, u) = (self.in_features, self.out_features);
        if pass == Backprop::Full {
            let mut dw = vec![T::zero(); f * u];
            gemm_tn_acc(x.data(), dy.data(), &mut dw, n, f, u);
            let mut db = vec![T::zero(); u];
            for row in dy.data().chunks(u) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            self.weight.set_grad(Tensor::from_vec(&[f, u], dw)?)?;
            self.bias.set_grad(Tensor::from_vec(&[u], db)?)?;
        }
        let mut dx = vec![T::zero(); n * f];
        gemm_nt_acc(dy.data(), self.weight.value.data(), &mut dx, n, u, f);
        Tensor::from_vec(&[n, f], dx)
    }

    pub(super) fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    pub(super) fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }

    pub(super) fn state(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    pub(super) fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }
}
