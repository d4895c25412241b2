//! Dense row-major tensors and the numeric kernels the layers build on.
//!
//! Everything is generic over [`Real`], implemented for `f32` (the default
//! working precision) and `f64` (used by the finite-difference checks).
//! Image batches use NCHW layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

use crate::error::{shape_err, Result};

/// Floating point element type.
pub trait Real: Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err("shape must have at least one dimension"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(shape_err(format!("dimension {pos} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(shape_err(format!(
                "{} values do not fill shape {shape:?} ({len} elements)",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Converts element precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product of the flattened buffers, accumulated in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(shape_err(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// `[N, C, H, W]` view of a rank-4 tensor; rank-2 `[N, F]` is read as `[N, F, 1, 1]`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            [n, c] => Ok((n, c, 1, 1)),
            _ => Err(shape_err(format!(
                "expected [N,C,H,W] or [N,C], got {:?}",
                self.shape
            ))),
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        self.expect_rank(2, "transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec(&[c, r], out)
    }

    /// Sample `n` of a batch tensor as its own batch of one.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let batch = self.shape[0];
        if n >= batch {
            return Err(shape_err(format!("batch index {n} out of range {batch}")));
        }
        let per = self.data.len() / batch;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self::from_vec(&shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors"))?;
        let (n, _, h, w) = first.nchw()?;
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.nchw()?;
            if (pn, ph, pw) != (n, h, w) || p.rank() != 4 {
                return Err(shape_err(format!(
                    "cannot concatenate {:?} with {:?} along channels",
                    first.shape, p.shape
                )));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for p in parts {
                let c = p.shape[1];
                out.extend_from_slice(&p.data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Self::from_vec(&[n, total_c, h, w], out)
    }

    /// Channel range `[start, start + count)` of an NCHW tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        self.expect_rank(4, "slice_channels")?;
        let (n, c, h, w) = self.nchw()?;
        if start + count > c || count == 0 {
            return Err(shape_err(format!(
                "channel slice {start}..{} out of range {c}",
                start + count
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * count * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Self::from_vec(&[n, count, h, w], out)
    }
}

/// Standard matrix product of `[m,k] x [k,n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(shape_err(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// `c[m,n] += a[m,k] * b[k,n]` on raw row-major slices.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Sliding-window geometry shared by convolution and im2col.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeometry {
    pub fn symmetric(kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh,
            kw,
            stride,
            pad_top: pad,
            pad_bottom: pad,
            pad_left: pad,
            pad_right: pad,
        }
    }

    /// "Same" padding: output is `ceil(in / stride)`; the odd pixel goes bottom/right.
    pub fn same(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let total = |size: usize, k: usize| {
            let out = size.div_ceil(stride);
            ((out - 1) * stride + k).saturating_sub(size)
        };
        let (th, tw) = (total(h, kh), total(w, kw));
        Self {
            kh,
            kw,
            stride,
            pad_top: th / 2,
            pad_bottom: th - th / 2,
            pad_left: tw / 2,
            pad_right: tw - tw / 2,
        }
    }

    /// Output spatial size, or a shape error when the windows do not tile exactly.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kh == 0 || self.kw == 0 || self.stride == 0 {
            return Err(shape_err("kernel dims and stride must be positive"));
        }
        let span = |size: usize, lo: usize, hi: usize, k: usize, axis: &str| {
            let padded = size + lo + hi;
            if padded < k {
                return Err(shape_err(format!(
                    "kernel {k} larger than padded {axis} {padded}"
                )));
            }
            if !(padded - k).is_multiple_of(self.stride) {
                return Err(shape_err(format!(
                    "non-integral output {axis}: ({padded} - {k}) / {} is fractional",
                    self.stride
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((
            span(h, self.pad_top, self.pad_bottom, self.kh, "height")?,
            span(w, self.pad_left, self.pad_right, self.kw, "width")?,
        ))
    }
}

/// Unfolds receptive fields of `x: [N,C,H,W]` into `[C*kh*kw, N*Ho*Wo]` with
/// symmetric zero padding.
pub fn im2col<T: Real>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    im2col_geom(x, &ConvGeometry::symmetric(kh, kw, stride, pad))
}

pub fn im2col_geom<T: Real>(x: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    x.expect_rank(4, "im2col")?;
    let (n, c, h, w) = x.nchw()?;
    let (ho, wo) = g.output_dims(h, w)?;
    let rows = c * g.kh * g.kw;
    let cols = n * ho * wo;
    let mut out = vec![T::zero(); rows * cols];
    let src = x.data();
    for ch in 0..c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ch * g.kh + i) * g.kw + j;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + i) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + j) as isize - g.pad_left as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[base + ox] = plane[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[rows, cols], out)
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an `[N,C,H,W]` image.
pub fn col2im<T: Real>(
    cols_t: &Tensor<T>,
    input_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    col2im_geom(
        cols_t,
        input_shape,
        &ConvGeometry::symmetric(kh, kw, stride, pad),
    )
}

pub fn col2im_geom<T: Real>(
    cols_t: &Tensor<T>,
    input_shape: &[usize],
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = *input_shape else {
        return Err(shape_err(format!(
            "col2im expects an [N,C,H,W] target shape, got {input_shape:?}"
        )));
    };
    let (ho, wo) = g.output_dims(h, w)?;
    let rows = c * g.kh * g.kw;
    let cols = n * ho * wo;
    if cols_t.shape() != [rows, cols] {
        return Err(shape_err(format!(
            "col2im expects columns of shape [{rows}, {cols}], got {:?}",
            cols_t.shape()
        )));
    }
    let mut out = vec![T::zero(); n * c * h * w];
    let src = cols_t.data();
    for ch in 0..c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ch * g.kh + i) * g.kw + j;
                let col_row = &src[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + i) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let base = (b * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + j) as isize - g.pad_left as isize;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy * w + ix as usize] += col_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, out)
}
