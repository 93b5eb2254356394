//! Dense tensor engine with forward and backward passes for every primitive
//! the network needs: convolution, transposed convolution, 2x2 max pooling,
//! ReLU/sigmoid, matrix product and row softmax.
//!
//! Layout conventions:
//! - feature maps are `H x W x C`, row-major with the channel index fastest;
//! - matrices are `rows x cols`, row-major;
//! - convolution kernels are `kH x kW x inC x outC`.
//!
//! Convolution is cross-correlation (no kernel flip), the usual deep-learning
//! convention. All arithmetic is in `f64`.

use crate::error::{Error, Result};

/// Dense rank-1..4 array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `values.len()` equals the shape product.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Dimension(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![value; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Reinterprets the flat values under a new shape of equal length.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.values.clone())
    }

    /// Element access for `H x W x C` feature maps.
    #[inline]
    pub fn at3(&self, h: usize, w: usize, c: usize) -> f64 {
        let (_, wd, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.values[(h * wd + w) * ch + c]
    }

    #[inline]
    pub fn set3(&mut self, h: usize, w: usize, c: usize, v: f64) {
        let (_, wd, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.values[(h * wd + w) * ch + c] = v;
    }

    #[inline]
    pub fn add3(&mut self, h: usize, w: usize, c: usize, v: f64) {
        let (_, wd, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.values[(h * wd + w) * ch + c] += v;
    }

    /// Element access for `rows x cols` matrices.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.shape[1] + c] = v;
    }

    #[inline]
    pub fn add2(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.shape[1] + c] += v;
    }

    /// Matrix transpose (rank-2 only).
    pub fn transpose2(&self) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[cols, rows]);
        for r in 0..rows {
            for c in 0..cols {
                out.set2(c, r, self.at2(r, c));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), values })
    }

    /// Accumulates `other` into `self` in place.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add_assign: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Flat inner product of two equal-shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "dot: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Convolution kernel: `kH x kW x inC x outC` weights, a bias vector and a stride.
///
/// The same struct backs transposed convolutions, where the channel roles swap:
/// `deconv2d` consumes `outC`-channel input and emits `inC` channels, so a
/// kernel built for deconvolution carries a bias of length `inC`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f64>, stride: usize) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::Dimension(format!(
                "kernel weights must be rank 4 (kH x kW x inC x outC), got rank {}",
                weights.rank()
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("stride must be >= 1".into()));
        }
        let bias = Tensor::new(&[bias.len().max(1)], if bias.is_empty() { vec![0.0] } else { bias })?;
        Ok(Self { weights, bias, stride })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.values()
    }

    pub fn bias_tensor(&self) -> &Tensor {
        &self.bias
    }

    pub fn bias_tensor_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    /// Mutable access to weights and bias at once, for parameter visitors.
    pub fn weights_and_bias_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn k_h(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn k_w(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[3]
    }

    #[inline]
    fn w(&self, kh: usize, kw: usize, ic: usize, oc: usize) -> f64 {
        let s = self.weights.shape();
        self.weights.values()[((kh * s[1] + kw) * s[2] + ic) * s[3] + oc]
    }
}

/// Gradients of a convolution-like op with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

fn expect_feature_map(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "{what} must be H x W x C, got rank {}",
            x.rank()
        )));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2]))
}

/// 2-D convolution (cross-correlation) with explicit symmetric zero padding.
///
/// Output spatial size is `floor((H + 2*padding - kH)/stride) + 1`.
pub fn conv2d(x: &Tensor, k: &ConvKernel, padding: usize) -> Result<Tensor> {
    let (h, w, in_c) = expect_feature_map(x, "conv2d input")?;
    if in_c != k.in_channels() {
        return Err(Error::Dimension(format!(
            "conv2d: input has {in_c} channels, kernel expects {}",
            k.in_channels()
        )));
    }
    if k.bias().len() != k.out_channels() {
        return Err(Error::Dimension(format!(
            "conv2d: bias length {} != outC {}",
            k.bias().len(),
            k.out_channels()
        )));
    }
    if h + 2 * padding < k.k_h() || w + 2 * padding < k.k_w() {
        return Err(Error::Dimension(format!(
            "conv2d: padded input {}x{} smaller than kernel {}x{}",
            h + 2 * padding,
            w + 2 * padding,
            k.k_h(),
            k.k_w()
        )));
    }
    let s = k.stride();
    let out_h = (h + 2 * padding - k.k_h()) / s + 1;
    let out_w = (w + 2 * padding - k.k_w()) / s + 1;
    let out_c = k.out_channels();
    let mut out = Tensor::zeros(&[out_h, out_w, out_c]);
    for oh in 0..out_h {
        for ow in 0..out_w {
            for oc in 0..out_c {
                let mut acc = k.bias()[oc];
                for kh in 0..k.k_h() {
                    let ih = oh * s + kh;
                    if ih < padding || ih - padding >= h {
                        continue;
                    }
                    for kw in 0..k.k_w() {
                        let iw = ow * s + kw;
                        if iw < padding || iw - padding >= w {
                            continue;
                        }
                        for ic in 0..in_c {
                            acc += x.at3(ih - padding, iw - padding, ic) * k.w(kh, kw, ic, oc);
                        }
                    }
                }
                out.set3(oh, ow, oc, acc);
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d(x, k, padding))` with respect to
/// the input, the kernel weights and the bias.
pub fn conv2d_backward(
    x: &Tensor,
    k: &ConvKernel,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (h, w, in_c) = expect_feature_map(x, "conv2d input")?;
    let s = k.stride();
    let out_h = (h + 2 * padding - k.k_h()) / s + 1;
    let out_w = (w + 2 * padding - k.k_w()) / s + 1;
    let out_c = k.out_channels();
    if grad_out.shape() != [out_h, out_w, out_c] {
        return Err(Error::Dimension(format!(
            "conv2d_backward: grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [out_h, out_w, out_c]
        )));
    }
    if in_c != k.in_channels() {
        return Err(Error::Dimension(format!(
            "conv2d_backward: input has {in_c} channels, kernel expects {}",
            k.in_channels()
        )));
    }
    let mut grad_x = Tensor::zeros(&[h, w, in_c]);
    let mut grad_w = Tensor::zeros(k.weights().shape());
    let mut grad_b = vec![0.0; out_c];
    let ws = k.weights().shape().to_vec();
    for oh in 0..out_h {
        for ow in 0..out_w {
            for oc in 0..out_c {
                let g = grad_out.at3(oh, ow, oc);
                grad_b[oc] += g;
                if g == 0.0 {
                    continue;
                }
                for kh in 0..k.k_h() {
                    let ih = oh * s + kh;
                    if ih < padding || ih - padding >= h {
                        continue;
                    }
                    for kw in 0..k.k_w() {
                        let iw = ow * s + kw;
                        if iw < padding || iw - padding >= w {
                            continue;
                        }
                        for ic in 0..in_c {
                            let widx = ((kh * ws[1] + kw) * ws[2] + ic) * ws[3] + oc;
                            grad_w.values_mut()[widx] += g * x.at3(ih - padding, iw - padding, ic);
                            grad_x.add3(ih - padding, iw - padding, ic, g * k.w(kh, kw, ic, oc));
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: grad_x, weights: grad_w, bias: grad_b })
}

/// Transposed convolution. The kernel keeps the orientation of the forward
/// convolution it is adjoint to: the input must have `outC` channels and the
/// output has `inC` channels of size `(H-1)*stride + kH - 2*padding`.
///
/// With zero bias this is the exact adjoint of [`conv2d`]:
/// `<deconv2d(x,k,p), y> == <x, conv2d(y,k,p)>`.
pub fn deconv2d(x: &Tensor, k: &ConvKernel, padding: usize) -> Result<Tensor> {
    let (h, w, ch) = expect_feature_map(x, "deconv2d input")?;
    if ch != k.out_channels() {
        return Err(Error::Dimension(format!(
            "deconv2d: input has {ch} channels, kernel transposes {} (outC)",
            k.out_channels()
        )));
    }
    if k.bias().len() != k.in_channels() {
        return Err(Error::Dimension(format!(
            "deconv2d: bias length {} != inC {}",
            k.bias().len(),
            k.in_channels()
        )));
    }
    let s = k.stride();
    let full_h = (h - 1) * s + k.k_h();
    let full_w = (w - 1) * s + k.k_w();
    if full_h < 2 * padding + 1 || full_w < 2 * padding + 1 {
        return Err(Error::Dimension(format!(
            "deconv2d: padding {padding} too large for output {full_h}x{full_w}"
        )));
    }
    let out_h = full_h - 2 * padding;
    let out_w = full_w - 2 * padding;
    let in_c = k.in_channels();
    let mut out = Tensor::zeros(&[out_h, out_w, in_c]);
    for c in 0..in_c {
        let b = k.bias()[c];
        if b != 0.0 {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    out.add3(oh, ow, c, b);
                }
            }
        }
    }
    for ih in 0..h {
        for iw in 0..w {
            for kh in 0..k.k_h() {
                let oh = ih * s + kh;
                if oh < padding || oh - padding >= out_h {
                    continue;
                }
                for kw in 0..k.k_w() {
                    let ow = iw * s + kw;
                    if ow < padding || ow - padding >= out_w {
                        continue;
                    }
                    for ic in 0..in_c {
                        for oc in 0..ch {
                            out.add3(
                                oh - padding,
                                ow - padding,
                                ic,
                                x.at3(ih, iw, oc) * k.w(kh, kw, ic, oc),
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * deconv2d(x, k, padding))`.
pub fn deconv2d_backward(
    x: &Tensor,
    k: &ConvKernel,
    padding: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (h, w, ch) = expect_feature_map(x, "deconv2d input")?;
    if ch != k.out_channels() {
        return Err(Error::Dimension(format!(
            "deconv2d_backward: input has {ch} channels, kernel transposes {}",
            k.out_channels()
        )));
    }
    let s = k.stride();
    let out_h = (h - 1) * s + k.k_h() - 2 * padding;
    let out_w = (w - 1) * s + k.k_w() - 2 * padding;
    let in_c = k.in_channels();
    if grad_out.shape() != [out_h, out_w, in_c] {
        return Err(Error::Dimension(format!(
            "deconv2d_backward: grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [out_h, out_w, in_c]
        )));
    }
    let mut grad_x = Tensor::zeros(&[h, w, ch]);
    let mut grad_w = Tensor::zeros(k.weights().shape());
    let mut grad_b = vec![0.0; in_c];
    for c in 0..in_c {
        for oh in 0..out_h {
            for ow in 0..out_w {
                grad_b[c] += grad_out.at3(oh, ow, c);
            }
        }
    }
    let ws = k.weights().shape().to_vec();
    for ih in 0..h {
        for iw in 0..w {
            for kh in 0..k.k_h() {
                let oh = ih * s + kh;
                if oh < padding || oh - padding >= out_h {
                    continue;
                }
                for kw in 0..k.k_w() {
                    let ow = iw * s + kw;
                    if ow < padding || ow - padding >= out_w {
                        continue;
                    }
                    for ic in 0..in_c {
                        let g = grad_out.at3(oh - padding, ow - padding, ic);
                        if g == 0.0 {
                            continue;
                        }
                        for oc in 0..ch {
                            grad_x.add3(ih, iw, oc, g * k.w(kh, kw, ic, oc));
                            let widx = ((kh * ws[1] + kw) * ws[2] + ic) * ws[3] + oc;
                            grad_w.values_mut()[widx] += g * x.at3(ih, iw, oc);
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { input: grad_x, weights: grad_w, bias: grad_b })
}

/// Non-overlapping 2x2 max pooling. Returns the pooled map and, per output
/// element, the flat index of the chosen input value.
///
/// Ties break toward the first (row-major smallest) index so the backward
/// routing is deterministic.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = expect_feature_map(x, "maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2: spatial dims must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let mut indices = vec![0usize; oh * ow * c];
    for py in 0..oh {
        for px in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * py + dy, 2 * px + dx);
                        let v = x.at3(iy, ix, ch);
                        if v > best {
                            best = v;
                            best_idx = (iy * w + ix) * c + ch;
                        }
                    }
                }
                out.set3(py, px, ch, best);
                indices[(py * ow + px) * c + ch] = best_idx;
            }
        }
    }
    Ok((out, indices))
}

/// Routes the pooled gradient back to the argmax positions.
pub fn maxpool2_backward(input_shape: &[usize], indices: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad_x = Tensor::zeros(input_shape);
    for (slot, &idx) in indices.iter().enumerate() {
        grad_x.values_mut()[idx] += grad_out.values()[slot];
    }
    grad_x
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward of ReLU given the forward *input*.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), grad_out.shape());
    let values = x
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor { shape: x.shape().to_vec(), values }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward of sigmoid given the forward *output* `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape(), grad_out.shape());
    let values = y
        .values()
        .iter()
        .zip(grad_out.values())
        .map(|(&v, &g)| g * v * (1.0 - v))
        .collect();
    Tensor { shape: y.shape().to_vec(), values }
}

/// Standard matrix product of an `m x k` by a `k x n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul: expected matrices, got ranks {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul: inner dims {ka} vs {kb} do not match"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..ka {
                acc += a.at2(i, t) * b.at2(t, j);
            }
            out.set2(i, j, acc);
        }
    }
    Ok(out)
}

/// Softmax over each row of a matrix, computed with max subtraction so large
/// inputs do not overflow.
pub fn softmax_rows(s: &Tensor) -> Result<Tensor> {
    if s.rank() != 2 {
        return Err(Error::Dimension(format!(
            "softmax_rows: expected a matrix, got rank {}",
            s.rank()
        )));
    }
    let (rows, cols) = (s.shape()[0], s.shape()[1]);
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            max = max.max(s.at2(r, c));
        }
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (s.at2(r, c) - max).exp();
            out.set2(r, c, e);
            sum += e;
        }
        for c in 0..cols {
            out.set2(r, c, out.at2(r, c) / sum);
        }
    }
    Ok(out)
}

/// Backward of row softmax given its forward output `y`.
pub fn softmax_rows_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape(), grad_out.shape());
    let (rows, cols) = (y.shape()[0], y.shape()[1]);
    let mut grad = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let mut inner = 0.0;
        for c in 0..cols {
            inner += grad_out.at2(r, c) * y.at2(r, c);
        }
        for c in 0..cols {
            grad.set2(r, c, y.at2(r, c) * (grad_out.at2(r, c) - inner));
        }
    }
    grad
}

/// Channel concatenation of two feature maps with identical spatial size.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ha, wa, ca) = expect_feature_map(a, "concat lhs")?;
    let (hb, wb, cb) = expect_feature_map(b, "concat rhs")?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::Dimension(format!(
            "concat: spatial {ha}x{wa} vs {hb}x{wb}"
        )));
    }
    let mut out = Tensor::zeros(&[ha, wa, ca + cb]);
    for h in 0..ha {
        for w in 0..wa {
            for c in 0..ca {
                out.set3(h, w, c, a.at3(h, w, c));
            }
            for c in 0..cb {
                out.set3(h, w, ca + c, b.at3(h, w, c));
            }
        }
    }
    Ok(out)
}

/// Splits a channel concatenation back into its two halves.
pub fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = expect_feature_map(x, "split input")?;
    if first == 0 || first >= c {
        return Err(Error::Dimension(format!(
            "split: first part {first} out of {c} channels"
        )));
    }
    let mut a = Tensor::zeros(&[h, w, first]);
    let mut b = Tensor::zeros(&[h, w, c - first]);
    for y in 0..h {
        for x_ in 0..w {
            for ch in 0..first {
                a.set3(y, x_, ch, x.at3(y, x_, ch));
            }
            for ch in first..c {
                b.set3(y, x_, ch - first, x.at3(y, x_, ch));
            }
        }
    }
    Ok((a, b))
}
