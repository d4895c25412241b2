//! Convolution as im2col + GEMM, and the depthwise-separable variant.
//!
//! Both are cross-correlations (no kernel flip) over NCHW input.

use rand::Rng;

use super::{cmat_to_nchw, he_normal, missing_forward, nchw_to_cmat, Backprop, LayerSpec, Mode, Padding, Param};
use crate::error::{shape_err, Result};
use crate::tensor::{col2im_geom, gemm_acc, gemm_nt_acc, gemm_tn_acc, im2col_geom, ConvGeometry, Real, Tensor};

fn geometry(padding: Padding, h: usize, w: usize, k: usize, stride: usize) -> ConvGeometry {
    match padding {
        Padding::Same => ConvGeometry::same(h, w, k, k, stride),
        Padding::Valid => ConvGeometry::symmetric(k, k, stride, 0),
    }
}

fn check_input(name: &str, shape: &[usize], channels: usize) -> Result<(usize, usize, usize, usize)> {
    let [n, c, h, w] = *shape else {
        return Err(shape_err(format!("{name}: expected [N,C,H,W] input, got {shape:?}")));
    };
    if c != channels {
        return Err(shape_err(format!(
            "{name}: expected {channels} input channels, got {c}"
        )));
    }
    Ok((n, c, h, w))
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    input_shape: Vec<usize>,
    geom: ConvGeometry,
    cols: Tensor<T>,
    out_hw: (usize, usize),
}

/// 2-D convolution with weights `[Cout, Cin, k, k]` and bias `[Cout]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<ConvCache<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(shape_err(format!("{name}: conv dims must be positive")));
        }
        let weight = he_normal(
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            rng,
        )?;
        Ok(Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])?),
            cache: None,
        })
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            name: self.name.clone(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (n, _, h, w) = check_input(&self.name, input, self.in_channels)?;
        let (ho, wo) = geometry(self.padding, h, w, self.kernel, self.stride).output_dims(h, w)?;
        Ok(vec![n, self.out_channels, ho, wo])
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, _, h, w) = check_input(&self.name, x.shape(), self.in_channels)?;
        let geom = geometry(self.padding, h, w, self.kernel, self.stride);
        let (ho, wo) = geom.output_dims(h, w)?;
        let cols = im2col_geom(x, &geom)?;
        let k = self.in_channels * self.kernel * self.kernel;
        let np = n * ho * wo;
        let mut out = vec![T::zero(); self.out_channels * np];
        for (o, row) in out.chunks_mut(np).enumerate() {
            row.fill(self.bias.value.data()[o]);
        }
        gemm_acc(self.weight.value.data(), cols.data(), &mut out, self.out_channels, k, np);
        self.cache = Some(ConvCache {
            input_shape: x.shape().to_vec(),
            geom,
            cols,
            out_hw: (ho, wo),
        });
        Tensor::from_vec(
            &[n, self.out_channels, ho, wo],
            cmat_to_nchw(&out, n, self.out_channels, ho * wo),
        )
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward(&self.name))?;
        let n = cache.input_shape[0];
        let (ho, wo) = cache.out_hw;
        let expected = [n, self.out_channels, ho, wo];
        if dy.shape() != expected {
            return Err(shape_err(format!(
                "{}: output gradient {:?} does not match forward output {expected:?}",
                self.name,
                dy.shape()
            )));
        }
        let k = self.in_channels * self.kernel * self.kernel;
        let np = n * ho * wo;
        let dy_mat = nchw_to_cmat(dy.data(), n, self.out_channels, ho * wo);

        if pass == Backprop::Full {
            let mut dw = vec![T::zero(); self.out_channels * k];
            gemm_nt_acc(&dy_mat, cache.cols.data(), &mut dw, self.out_channels, np, k);
            let db: Vec<T> = dy_mat.chunks(np).map(|row| row.iter().copied().sum()).collect();
            self.weight
                .set_grad(Tensor::from_vec(self.weight.value.shape(), dw)?)?;
            self.bias.set_grad(Tensor::from_vec(&[self.out_channels], db)?)?;
        }

        let mut dcols = vec![T::zero(); k * np];
        gemm_tn_acc(self.weight.value.data(), &dy_mat, &mut dcols, self.out_channels, k, np);
        col2im_geom(&Tensor::from_vec(&[k, np], dcols)?, &cache.input_shape, &cache.geom)
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

#[derive(Debug, Clone)]
struct SeparableCache<T> {
    input_shape: Vec<usize>,
    geom: ConvGeometry,
    cols: Tensor<T>,
    /// Depthwise output as a `[Cin, N*Ho*Wo]` matrix.
    mid: Vec<T>,
    out_hw: (usize, usize),
}

/// Depthwise `[Cin, 1, k, k]` convolution followed by a pointwise
/// `[Cout, Cin, 1, 1]` convolution with bias `[Cout]`.
#[derive(Debug, Clone)]
pub struct SeparableConv2d<T> {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
    pub depthwise: Param<T>,
    pub pointwise: Param<T>,
    pub bias: Param<T>,
    cache: Option<SeparableCache<T>>,
}

impl<T: Real> SeparableConv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(shape_err(format!("{name}: conv dims must be positive")));
        }
        let depthwise = he_normal(&[in_channels, 1, kernel, kernel], kernel * kernel, rng)?;
        let pointwise = he_normal(&[out_channels, in_channels, 1, 1], in_channels, rng)?;
        Ok(Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            depthwise: Param::new(depthwise),
            pointwise: Param::new(pointwise),
            bias: Param::new(Tensor::zeros(&[out_channels])?),
            cache: None,
        })
    }

    pub(super) fn spec(&self) -> LayerSpec {
        LayerSpec::SeparableConv2d {
            name: self.name.clone(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parameter_count(&self) -> usize {
        self.depthwise.value.len() + self.pointwise.value.len() + self.bias.value.len()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (n, _, h, w) = check_input(&self.name, input, self.in_channels)?;
        let (ho, wo) = geometry(self.padding, h, w, self.kernel, self.stride).output_dims(h, w)?;
        Ok(vec![n, self.out_channels, ho, wo])
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (n, cin, h, w) = check_input(&self.name, x.shape(), self.in_channels)?;
        let geom = geometry(self.padding, h, w, self.kernel, self.stride);
        let (ho, wo) = geom.output_dims(h, w)?;
        let cols = im2col_geom(x, &geom)?;
        let kk = self.kernel * self.kernel;
        let np = n * ho * wo;

        // Depthwise: each channel's kernel meets only that channel's rows of the column matrix.
        let mut mid = vec![T::zero(); cin * np];
        for c in 0..cin {
            let kernel = &self.depthwise.value.data()[c * kk..(c + 1) * kk];
            let rows = &cols.data()[c * kk * np..(c + 1) * kk * np];
            gemm_acc(kernel, rows, &mut mid[c * np..(c + 1) * np], 1, kk, np);
        }

        let mut out = vec![T::zero(); self.out_channels * np];
        for (o, row) in out.chunks_mut(np).enumerate() {
            row.fill(self.bias.value.data()[o]);
        }
        gemm_acc(self.pointwise.value.data(), &mid, &mut out, self.out_channels, cin, np);

        self.cache = Some(SeparableCache {
            input_shape: x.shape().to_vec(),
            geom,
            cols,
            mid,
            out_hw: (ho, wo),
        });
        Tensor::from_vec(
            &[n, self.out_channels, ho, wo],
            cmat_to_nchw(&out, n, self.out_channels, ho * wo),
        )
    }

    pub fn backward(&mut self, dy: &Tensor<T>, pass: Backprop) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward(&self.name))?;
        let n = cache.input_shape[0];
        let cin = self.in_channels;
        let (ho, wo) = cache.out_hw;
        let expected = [n, self.out_channels, ho, wo];
        if dy.shape() != expected {
            return Err(shape_err(format!(
                "{}: output gradient {:?} does not match forward output {expected:?}",
                self.name,
                dy.shape()
            )));
        }
        let kk = self.kernel * self.kernel;
        let np = n * ho * wo;
        let dy_mat = nchw_to_cmat(dy.data(), n, self.out_channels, ho * wo);

        let mut dmid = vec![T::zero(); cin * np];
        gemm_tn_acc(self.pointwise.value.data(), &dy_mat, &mut dmid, self.out_channels, cin, np);

        if pass == Backprop::Full {
            let mut dpw = vec![T::zero(); self.out_channels * cin];
            gemm_nt_acc(&dy_mat, &cache.mid, &mut dpw, self.out_channels, np, cin);
            let db: Vec<T> = dy_mat.chunks(np).map(|row| row.iter().copied().sum()).collect();
            let mut ddw = vec![T::zero(); cin * kk];
            for c in 0..cin {
                let rows = &cache.cols.data()[c * kk * np..(c + 1) * kk * np];
                gemm_nt_acc(&dmid[c * np..(c + 1) * np], rows, &mut ddw[c * kk..(c + 1) * kk], 1, np, kk);
            }
            self.pointwise
                .set_grad(Tensor::from_vec(self.pointwise.value.shape(), dpw)?)?;
            self.bias.set_grad(Tensor::from_vec(&[self.out_channels], db)?)?;
            self.depthwise
                .set_grad(Tensor::from_vec(self.depthwise.value.shape(), ddw)?)?;
        }

        let mut dcols = vec![T::zero(); cin * kk * np];
        for c in 0..cin {
            let kernel = &self.depthwise.value.data()[c * kk..(c + 1) * kk];
            gemm_tn_acc(
                kernel,
                &dmid[c * np..(c + 1) * np],
                &mut dcols[c * kk * np..(c + 1) * kk * np],
                1,
                kk,
                np,
            );
        }
        col2im_geom(&Tensor::from_vec(&[cin * kk, np], dcols)?, &cache.input_shape, &cache.geom)
    }

    pub(super) fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![
            ("depthwise".into(), &self.depthwise),
            ("pointwise".into(), &self.pointwise),
            ("bias".into(), &self.bias),
        ]
    }

    pub(super) fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![
            ("depthwise".into(), &mut self.depthwise),
            ("pointwise".into(), &mut self.pointwise),
            ("bias".into(), &mut self.bias),
        ]
    }

    pub(super) fn state(&self) -> Vec<(String, &Tensor<T>)> {
        Vec::new()
    }

    pub(super) fn state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct sliding-window cross-correlation with explicit zero padding.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.nchw().unwrap();
        let (o, _, k, _) = w.nchw().unwrap();
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let mut out = vec![0.0; n * o * ho * wo];
        for bi in 0..n {
            for oc in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = b[oc];
                        for ic in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = y as isize + i as isize - pad as isize;
                                    let ix = xx as isize + j as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * ho + y) * wo + xx] = s;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, o, ho, wo], out).unwrap()
    }

    #[test]
    fn scalar_conv() {
        let mut conv = Conv2d::<f32>::new("c", 1, 1, 1, 1, Padding::Valid, &mut rng()).unwrap();
        conv.weight.value = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv.forward(&x, Mode::Training).unwrap().data(), &[6.0]);
    }

    #[test]
    fn window_sum_valid() {
        let mut conv = Conv2d::<f32>::new("c", 1, 1, 3, 1, Padding::Valid, &mut rng()).unwrap();
        conv.weight.value = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let x = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn same_padding_matches_naive_conv() {
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 1, Padding::Same, &mut rng()).unwrap();
        conv.bias.value = random(&[3], 5);
        let x = random(&[1, 2, 5, 5], 6);
        let got = conv.forward(&x, Mode::Training).unwrap();
        let expected = naive_conv(&x, &conv.weight.value, conv.bias.value.data(), 1);
        assert_eq!(got.shape(), &[1, 3, 5, 5]);
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut conv = Conv2d::<f32>::new("c", 2, 3, 3, 1, Padding::Same, &mut rng()).unwrap();
        let x = Tensor::zeros(&[1, 3, 5, 5]).unwrap();
        assert!(matches!(conv.forward(&x, Mode::Training), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut conv = Conv2d::<f32>::new("c", 1, 1, 3, 1, Padding::Same, &mut rng()).unwrap();
        let dy = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(conv.backward(&dy, Backprop::Full), Err(crate::Error::State(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut conv = Conv2d::<f64>::new("c", 2, 2, 3, 1, Padding::Same, &mut rng()).unwrap();
        let x = random(&[2, 2, 4, 4], 1);
        let y = conv.forward(&x, Mode::Training).unwrap();
        let dx = conv.backward(&y.zeros_like(), Backprop::Full).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(conv.weight.grad.data().iter().all(|&v| v == 0.0));
        assert!(conv.bias.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_weight_gradient_is_input_times_dy() {
        let mut conv = Conv2d::<f64>::new("c", 1, 1, 1, 1, Padding::Valid, &mut rng()).unwrap();
        let x = random(&[2, 1, 3, 3], 2);
        conv.forward(&x, Mode::Training).unwrap();
        let dy = random(&[2, 1, 3, 3], 3);
        conv.backward(&dy, Backprop::Full).unwrap();
        let expected: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        assert!((conv.weight.grad.data()[0] - expected).abs() < 1e-12);
        assert!((conv.bias.grad.data()[0] - dy.sum()).abs() < 1e-12);
    }

    #[test]
    fn separable_identity_composition() {
        let mut sep = SeparableConv2d::<f32>::new("s", 3, 3, 3, 1, Padding::Same, &mut rng()).unwrap();
        let mut delta = vec![0.0; 27];
        for c in 0..3 {
            delta[c * 9 + 4] = 1.0;
        }
        sep.depthwise.value = Tensor::from_vec(&[3, 1, 3, 3], delta).unwrap();
        sep.pointwise.value =
            Tensor::from_vec(&[3, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = random(&[2, 3, 4, 4], 9).cast::<f32>();
        assert_eq!(sep.forward(&x, Mode::Evaluation).unwrap(), x);
    }

    #[test]
    fn separable_equals_composed_full_conv() {
        let (cin, cout, k) = (3, 4, 3);
        let mut sep = SeparableConv2d::<f64>::new("s", cin, cout, k, 1, Padding::Same, &mut rng()).unwrap();
        sep.bias.value = random(&[cout], 4);
        let x = random(&[2, cin, 5, 5], 10);
        let got = sep.forward(&x, Mode::Training).unwrap();
        let dw = sep.depthwise.value.data();
        let pw = sep.pointwise.value.data();
        let mut full = vec![0.0; cout * cin * k * k];
        for o in 0..cout {
            for c in 0..cin {
                for ij in 0..k * k {
                    full[(o * cin + c) * k * k + ij] = pw[o * cin + c] * dw[c * k * k + ij];
                }
            }
        }
        let full = Tensor::from_vec(&[cout, cin, k, k], full).unwrap();
        let expected = naive_conv(&x, &full, sep.bias.value.data(), 1);
        assert!(got.max_abs_diff(&expected).unwrap() < 1e-12);
        assert_eq!(sep.parameter_count(), cin * k * k + cin * cout + cout);
    }
}
